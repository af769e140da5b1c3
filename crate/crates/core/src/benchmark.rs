//! Multi-seed comparison of the two pipelines on the phantom benchmark.
//!
//! Each seed writes `seed_<s>/seed.json` when it finishes; aggregation reads
//! only those files, so seeds can run in separate processes and an interrupted
//! benchmark picks up where it stopped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalstats::{bag_stats, emit_report, one_sample_ttest, paired_abs_error_ttest, EvalReport, ModelEval, TTest};
use crate::checkpoint::save_model;
use crate::experiment::{age_groups, control_model, embedding_order, evaluate, saliency_study, Localization, Prepared, SaliencyStudy};
use crate::phantom::{generate_cohort, write_volume, LabeledSample, Volume, ACCELERATED_GROUP};
use crate::train::{train, write_history, Pipeline, RunOptions, SampleSet};
use crate::util::{atomic_write, read_json, write_json};

pub const NULL_GROUP: &str = "null";
const SEED_FILE: &str = "seed.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Shared by both pipelines; section seeds are replaced per benchmark seed.
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Years of extra apparent aging in the accelerated cohort.
    pub delta: f64,
    /// Size of the accelerated cohort and of the δ = 0 null cohort.
    pub cohort_size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            base: ExperimentConfig::default(),
            seeds: vec![0, 1, 2],
            delta: 8.0,
            cohort_size: 75,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.seeds.len() < 2 {
            return Err(Error::invalid("benchmark seeds", "comparisons need at least 2 seeds"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::invalid("benchmark seeds", "seeds must be distinct"));
        }
        if self.cohort_size < 2 {
            return Err(Error::invalid("cohort size", "need at least 2"));
        }
        let ph = &self.base.phantom;
        if !(self.delta >= 0.0 && ph.age_min + self.delta < ph.age_max) {
            return Err(Error::invalid("delta", format!("{} leaves no valid age range", self.delta)));
        }
        Ok(())
    }

    pub fn seed_config(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.apply_seed(seed);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortBag {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// One-sample test of the cohort BAG against zero.
    pub vs_zero: TTest,
    /// One-sample test of the cohort BAG against the control mean BAG.
    pub vs_control: TTest,
    /// Cohort mean BAG minus control mean BAG.
    pub gap: f64,
}

fn cohort_bag(preds: &[f64], ages: &[f64], control_mean: f64) -> Result<CohortBag> {
    let b = bag_stats(preds, ages)?;
    Ok(CohortBag {
        n: b.bag.len(),
        mean: b.mean,
        std: b.std,
        vs_zero: b.test,
        vs_control: one_sample_ttest(&b.bag, control_mean)?,
        gap: b.mean - control_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub pipeline: Pipeline,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub stopped_epoch: Option<usize>,
    pub test: ModelEval,
    /// Spearman between label distance and embedding distance on test pairs.
    pub order_spearman: f64,
    pub accelerated: CohortBag,
    pub null: CohortBag,
    pub localization: Localization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    pub order_spearman: f64,
    pub localization: Localization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: String,
    pub delta: f64,
    pub pipelines: Vec<PipelineResult>,
    pub untrained: ControlResult,
    /// Paired test on |e_rnc| − |e_e2e| over the test split.
    pub paired: TTest,
}

impl SeedResult {
    pub fn pipeline(&self, p: Pipeline) -> Option<&PipelineResult> {
        self.pipelines.iter().find(|r| r.pipeline == p)
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Group-averaged maps and the atlases they were scored against.
fn write_study(dir: &Path, study: &SaliencyStudy) -> Result<()> {
    for (g, avg) in &study.averages {
        avg.write(&dir.join(format!("group_{g}.rvol")))?;
        let atlas = &study.atlases[g];
        let labels = atlas.labels.iter().map(|&l| l as f32).collect();
        write_volume(&dir.join(format!("atlas_{g}.rvol")), &Volume::new(atlas.dims, avg.spacing, labels)?)?;
    }
    Ok(())
}

fn render_cohort(prep: &Prepared, samples: &[LabeledSample]) -> Result<SampleSet> {
    SampleSet::render(&prep.info, &samples.iter().collect::<Vec<_>>())
}

/// Runs one seed end to end and writes its artifacts under `out/seed_<seed>`.
pub fn run_seed(spec: &BenchmarkSpec, seed: u64, out: &Path) -> Result<SeedResult> {
    spec.validate()?;
    let cfg = spec.seed_config(seed);
    let dir = seed_dir(out, seed);
    let started = Instant::now();

    let mut prep = Prepared::generate(&cfg)?;
    let acc = generate_cohort(spec.cohort_size, &cfg.phantom, ACCELERATED_GROUP, spec.delta, seed)?;
    let null = generate_cohort(spec.cohort_size, &cfg.phantom, NULL_GROUP, 0.0, seed)?;
    prep.info.group_offsets.insert(ACCELERATED_GROUP.into(), spec.delta);
    prep.info.group_offsets.insert(NULL_GROUP.into(), 0.0);
    let all: Vec<LabeledSample> = prep.samples.iter().chain(&acc).chain(&null).cloned().collect();
    write_json(&dir.join("manifest.json"), &serde_json::json!({ "info": prep.info, "samples": all }))?;
    let acc_set = render_cohort(&prep, &acc)?;
    let null_set = render_cohort(&prep, &null)?;
    let test_samples = prep.test_samples();
    let groups = age_groups(&prep.test, &cfg.gradram);

    let mut results = Vec::new();
    let mut evals = Vec::new();
    let mut embeddings = serde_json::Map::new();
    let mut cohort_rows = String::from("id,group,age,pipeline,prediction\n");
    for pipeline in [Pipeline::RncTwoStage, Pipeline::EndToEnd] {
        let mut tc = cfg.training.clone();
        tc.pipeline = pipeline;
        let t = Instant::now();
        let outcome = train(&prep.data, &cfg.encoder, &cfg.rnc, &cfg.augment, &tc, &RunOptions::default())?;
        info!("seed {seed} {pipeline}: trained in {:.0}s", t.elapsed().as_secs_f64());
        write_history(&dir.join(format!("history_{pipeline}.csv")), &outcome.history)?;
        let model = &outcome.model;
        save_model(&dir.join("models").join(format!("{pipeline}.ckpt")), model)?;
        let test = evaluate(model, pipeline.as_str(), &prep.test, &cfg.eval)?;
        let (emb, _) = model.infer(&prep.test.refs(), cfg.eval.chunk)?;
        let (_, acc_pred) = model.infer(&acc_set.refs(), cfg.eval.chunk)?;
        let (_, null_pred) = model.infer(&null_set.refs(), cfg.eval.chunk)?;
        let study = saliency_study(model, pipeline.as_str(), &prep.info, &test_samples, &prep.test, &groups, &cfg.gradram)?;
        let sal_dir = dir.join(format!("saliency_{pipeline}"));
        write_study(&sal_dir, &study)?;
        embeddings.insert(pipeline.to_string(), serde_json::to_value(&emb).expect("embeddings serialize"));
        for (group, set, preds) in [(ACCELERATED_GROUP, &acc_set, &acc_pred), (NULL_GROUP, &null_set, &null_pred)] {
            for ((id, age), p) in set.ids.iter().zip(&set.ages).zip(preds.iter()) {
                let _ = writeln!(cohort_rows, "{id},{group},{age},{pipeline},{p}");
            }
        }
        for row in &study.summary.groups {
            row.parcels.write_csv(&sal_dir.join(format!("parcels_{}.csv", row.group)))?;
        }
        results.push(PipelineResult {
            pipeline,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            stopped_epoch: outcome.stopped_epoch,
            order_spearman: embedding_order(&emb, &prep.test.ages)?,
            accelerated: cohort_bag(&acc_pred, &acc_set.ages, test.bag_mean)?,
            null: cohort_bag(&null_pred, &null_set.ages, test.bag_mean)?,
            localization: study.summary,
            test: test.clone(),
        });
        evals.push(test);
    }

    let control = control_model(&cfg.encoder, seed)?;
    let (emb0, _) = control.infer(&prep.test.refs(), cfg.eval.chunk)?;
    let mut gr = cfg.gradram.clone();
    gr.allow_untrained = true;
    let control_study = saliency_study(&control, "untrained", &prep.info, &test_samples, &prep.test, &groups, &gr)?;
    write_study(&dir.join("saliency_untrained"), &control_study)?;
    embeddings.insert("untrained".into(), serde_json::to_value(&emb0).expect("embeddings serialize"));
    embeddings.insert("ages".into(), serde_json::to_value(&prep.test.ages).expect("ages serialize"));
    write_json(&dir.join("embeddings.json"), &embeddings)?;
    atomic_write(&dir.join("cohorts.csv"), cohort_rows.as_bytes())?;

    let paired = paired_abs_error_ttest(&evals[0].abs_errors(), &evals[1].abs_errors())?;
    emit_report(&EvalReport::new(cfg.provenance(), evals)?, &dir.join("eval"))?;
    let result = SeedResult {
        seed,
        config_hash: cfg.hash(),
        delta: spec.delta,
        pipelines: results,
        untrained: ControlResult {
            order_spearman: embedding_order(&emb0, &prep.test.ages)?,
            localization: control_study.summary,
        },
        paired,
    };
    write_json(&dir.join(SEED_FILE), &result)?;
    info!("seed {seed} finished in {:.0}s", started.elapsed().as_secs_f64());
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub pipeline: Pipeline,
    pub mae: f64,
    pub r2: f64,
    pub order_spearman: f64,
    pub accelerated_gap: f64,
    pub informative_mass: f64,
    /// Seeds whose accelerated cohort BAG differs from zero at p < 0.05.
    pub accelerated_significant: usize,
    /// Seeds whose null cohort BAG is indistinguishable from the control mean (p > 0.05).
    pub null_indistinguishable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub spec: BenchmarkSpec,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<PipelineSummary>,
    pub untrained_order_spearman: f64,
    pub untrained_informative_mass: f64,
    /// Paired test on |e_rnc| − |e_e2e| pooled over every seed's test split.
    pub pooled_paired: TTest,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates completed seed reports.
pub fn aggregate(spec: &BenchmarkSpec, seeds: Vec<SeedResult>) -> Result<BenchmarkReport> {
    if seeds.is_empty() {
        return Err(Error::Empty { what: "benchmark seeds".into() });
    }
    let mut summary = Vec::new();
    for p in [Pipeline::RncTwoStage, Pipeline::EndToEnd] {
        let rs = seeds
            .iter()
            .map(|s| s.pipeline(p).ok_or_else(|| Error::invalid("seed report", format!("seed {} lacks {p}", s.seed))))
            .collect::<Result<Vec<_>>>()?;
        summary.push(PipelineSummary {
            pipeline: p,
            mae: mean(rs.iter().map(|r| r.test.metrics.mae)),
            r2: mean(rs.iter().map(|r| r.test.metrics.r2)),
            order_spearman: mean(rs.iter().map(|r| r.order_spearman)),
            accelerated_gap: mean(rs.iter().map(|r| r.accelerated.gap)),
            informative_mass: mean(rs.iter().map(|r| r.localization.informative_mass)),
            accelerated_significant: rs.iter().filter(|r| r.accelerated.vs_zero.p < 0.05).count(),
            null_indistinguishable: rs.iter().filter(|r| r.null.vs_control.p > 0.05).count(),
        });
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for s in &seeds {
        a.extend(s.pipeline(Pipeline::RncTwoStage).expect("checked").test.abs_errors());
        b.extend(s.pipeline(Pipeline::EndToEnd).expect("checked").test.abs_errors());
    }
    Ok(BenchmarkReport {
        spec: spec.clone(),
        untrained_order_spearman: mean(seeds.iter().map(|s| s.untrained.order_spearman)),
        untrained_informative_mass: mean(seeds.iter().map(|s| s.untrained.localization.informative_mass)),
        pooled_paired: paired_abs_error_ttest(&a, &b)?,
        seeds,
        summary,
    })
}

/// Reads the finished seed reports of `spec` from `out`.
pub fn load_seeds(spec: &BenchmarkSpec, out: &Path) -> Result<Vec<SeedResult>> {
    spec.seeds
        .iter()
        .map(|&s| {
            let path = seed_dir(out, s).join(SEED_FILE);
            let r: SeedResult = read_json(&path)?;
            if r.config_hash != spec.seed_config(s).hash() || r.delta != spec.delta {
                return Err(Error::invalid("seed report", format!("{} was produced by a different spec", path.display())));
            }
            Ok(r)
        })
        .collect()
}

/// Runs every seed lacking a completed report, then aggregates and writes
/// `benchmark.json` and `benchmark.md`.
pub fn run_benchmark(spec: &BenchmarkSpec, out: &Path) -> Result<BenchmarkReport> {
    spec.validate()?;
    write_json(&out.join("spec.json"), spec)?;
    for &seed in &spec.seeds {
        let done = seed_dir(out, seed).join(SEED_FILE);
        let reusable = done.is_file()
            && read_json::<SeedResult>(&done).is_ok_and(|r| r.config_hash == spec.seed_config(seed).hash() && r.delta == spec.delta);
        if reusable {
            info!("seed {seed}: reusing completed report");
        } else {
            run_seed(spec, seed, out)?;
        }
    }
    report(spec, out)
}

/// Aggregates completed seeds already on disk.
pub fn report(spec: &BenchmarkSpec, out: &Path) -> Result<BenchmarkReport> {
    let rep = aggregate(spec, load_seeds(spec, out)?)?;
    write_json(&out.join("benchmark.json"), &rep)?;
    atomic_write(&out.join("benchmark.md"), markdown(&rep).as_bytes())?;
    Ok(rep)
}

pub fn markdown(rep: &BenchmarkReport) -> String {
    let mut s = String::from("# Phantom benchmark\n\n");
    let _ = writeln!(
        s,
        "{} train / {} total phantoms per seed, accelerated-group offset {} years, {} seeds.\n",
        rep.spec.base.dataset.ratios.counts(rep.spec.base.dataset.size).0,
        rep.spec.base.dataset.size,
        rep.spec.delta,
        rep.seeds.len()
    );
    s.push_str("| seed | pipeline | epochs | MAE ± std (yr) | R² | order ρ | accel. gap (yr) | accel. p | null p | informative mass |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for seed in &rep.seeds {
        for r in &seed.pipelines {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} ± {:.3} | {:.3} | {:.3} | {:.2} | {:.2e} | {:.3} | {:.3} |",
                seed.seed,
                r.pipeline,
                r.epochs,
                r.test.metrics.mae,
                r.test.metrics.mae_std,
                r.test.metrics.r2,
                r.order_spearman,
                r.accelerated.gap,
                r.accelerated.vs_zero.p,
                r.null.vs_control.p,
                r.localization.informative_mass
            );
        }
        let _ = writeln!(
            s,
            "| {} | untrained | 0 | | | {:.3} | | | | {:.3} |",
            seed.seed, seed.untrained.order_spearman, seed.untrained.localization.informative_mass
        );
    }
    for p in &rep.summary {
        let _ = writeln!(
            s,
            "| mean | {} | | {:.3} | {:.3} | {:.3} | {:.2} | {}/{} sig. | {}/{} null | {:.3} |",
            p.pipeline,
            p.mae,
            p.r2,
            p.order_spearman,
            p.accelerated_gap,
            p.accelerated_significant,
            rep.seeds.len(),
            p.null_indistinguishable,
            rep.seeds.len(),
            p.informative_mass
        );
    }
    let _ = writeln!(
        s,
        "| mean | untrained | | | | {:.3} | | | | {:.3} |\n",
        rep.untrained_order_spearman, rep.untrained_informative_mass
    );
    s.push_str("Paired t-tests on |error(rnc-two-stage)| − |error(end-to-end)|:\n\n| seed | t | df | p |\n|---|---|---|---|\n");
    for seed in &rep.seeds {
        let _ = writeln!(s, "| {} | {:.3} | {} | {:.3e} |", seed.seed, seed.paired.t, seed.paired.df, seed.paired.p);
    }
    let t = &rep.pooled_paired;
    let _ = writeln!(s, "| pooled | {:.3} | {} | {:.3e} |", t.t, t.df, t.p);
    s
}
