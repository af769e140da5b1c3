use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rankage::benchmark::{self, BenchmarkSpec};
use rankage::checkpoint::{load_model, save_model, Checkpoint};
use rankage::config::ExperimentConfig;
use rankage::encoder::Model;
use rankage::evalstats::{emit_report, EvalReport};
use rankage::experiment::{evaluate, run_sweep, saliency_study, SweepAxis};
use rankage::gradram::age_group;
use rankage::phantom::{generate_dataset, write_dataset, write_volume, Dataset, DatasetInfo, Split, Volume};
use rankage::train::{append_log, train, write_history, Pipeline, RunOptions, SampleSet, TrainData};
use rankage::util::write_json;
use rankage::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rankage", version, about = "Rank-N-Contrast brain-age experiments on synthetic aging phantoms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON); missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed and every section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Train one pipeline on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pipeline: Option<Pipeline>,
        /// Continue from the training checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation, leaving a resumable checkpoint.
        #[arg(long)]
        epoch_budget: Option<usize>,
    },
    /// Metrics, BAG statistics and paired comparisons on one split.
    Eval {
        /// Model checkpoints; the file stem names each model.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
    /// Grad-RAM heatmaps, group averages and parcel scores.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "age")]
        group_by: Grouping,
        /// Permit maps of a model that never finished training.
        #[arg(long)]
        allow_untrained: bool,
    },
    /// Train and evaluate once per value of one configuration axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Aggregate the completed benchmark seeds found in the output directory.
    Report,
    /// Multi-seed comparison of both pipelines.
    Benchmark {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        cohort_size: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    /// Generate volumes, label maps and a manifest.
    Gen {
        /// Number of phantoms (default: dataset.size from the config).
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grouping {
    Age,
    Sex,
}

fn invalid(detail: String) -> Error {
    Error::Invalid { what: "arguments", detail }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| invalid("no output directory (use --out or set `out` in the config)".into()))
}

fn check_empty(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(invalid(format!("{} is not empty (use --force)", dir.display())));
    }
    Ok(())
}

/// Writes the effective configuration with its provenance header.
fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_json(&dir.join("config.json"), &cfg.provenance())?;
    println!("config {} (seed {}, version {})", cfg.hash(), cfg.seed, env!("CARGO_PKG_VERSION"));
    Ok(())
}

fn check_dims(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if cfg.encoder.input_dims != ds.info.phantom.dims {
        return Err(invalid(format!(
            "encoder input {:?} differs from dataset dims {:?}",
            cfg.encoder.input_dims, ds.info.phantom.dims
        )));
    }
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let force = cli.common.force;
    match cli.command {
        Command::Phantom {
            action: PhantomCmd::Gen { n },
        } => {
            if let Some(n) = n {
                cfg.dataset.size = n;
            }
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            check_empty(&out, force)?;
            let samples = generate_dataset(cfg.dataset.size, &cfg.phantom, cfg.dataset.ratios, cfg.seed)?;
            let info = DatasetInfo::new(cfg.phantom.clone());
            write_dataset(&out, &info, &samples)?;
            echo_config(&cfg, &out)?;
            let count = |s: Split| samples.iter().filter(|x| x.split == s).count();
            println!("train {} / val {} / test {}", count(Split::Train), count(Split::Val), count(Split::Test));
        }
        Command::Train {
            data,
            pipeline,
            resume,
            epoch_budget,
        } => {
            if let Some(p) = pipeline {
                cfg.training.pipeline = p;
            }
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let ds = Dataset::load(&data)?;
            check_dims(&cfg, &ds)?;
            let p = cfg.training.pipeline;
            let state = out.join(format!("train_{p}.ckpt"));
            let resume = if resume {
                if !state.is_file() {
                    return Err(invalid(format!("--resume: {} does not exist", state.display())));
                }
                Some(Checkpoint::read(&state)?)
            } else {
                None
            };
            let td = TrainData::load(&ds)?;
            echo_config(&cfg, &out)?;
            println!("parameters {}", Model::new(cfg.encoder.clone())?.parameter_count());
            let opts = RunOptions {
                checkpoint_path: Some(state),
                resume,
                epoch_budget,
            };
            let outcome = train(&td, &cfg.encoder, &cfg.rnc, &cfg.augment, &cfg.training, &opts)?;
            if let Some(path) = &opts.checkpoint_path {
                outcome.checkpoint.write(path)?;
            }
            write_history(&out.join(format!("history_{p}.csv")), &outcome.history)?;
            if !outcome.completed {
                println!("{p}: paused after {} epochs; rerun with --resume", outcome.history.len());
                return Ok(());
            }
            let model_path = out.join(format!("{p}.ckpt"));
            save_model(&model_path, &outcome.model)?;
            let line = format!(
                "{p}: {} epochs, best {:?}, stopped {:?}, model {}",
                outcome.history.len(),
                outcome.best_epoch,
                outcome.stopped_epoch,
                model_path.display()
            );
            append_log(&out.join("train.log"), &line)?;
            println!("{line}");
        }
        Command::Eval { models, data, split } => {
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let ds = Dataset::load(&data)?;
            let loaded = models
                .iter()
                .map(|p| Ok((model_name(p), load_model(p)?)))
                .collect::<Result<Vec<_>>>()?;
            for (name, m) in &loaded {
                if m.config.input_dims != ds.info.phantom.dims {
                    return Err(invalid(format!("model {name} expects {:?}", m.config.input_dims)));
                }
            }
            let set = SampleSet::from_dataset(&ds, split.into())?;
            echo_config(&cfg, &out)?;
            let evals = loaded
                .iter()
                .map(|(name, m)| evaluate(m, name, &set, &cfg.eval))
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport::new(cfg.provenance(), evals)?;
            emit_report(&report, &out)?;
            for m in &report.models {
                println!(
                    "{}: MAE {:.3} ± {:.3}, R² {:.3}, mean BAG {:.3} (p {:.3e})",
                    m.model, m.metrics.mae, m.metrics.mae_std, m.metrics.r2, m.bag_mean, m.bag_test.p
                );
            }
            for c in &report.paired {
                println!("{} vs {}: t {:.3}, p {:.3e}", c.model_a, c.model_b, c.test.t, c.test.p);
            }
        }
        Command::Saliency {
            model,
            data,
            split,
            group_by,
            allow_untrained,
        } => {
            cfg.gradram.allow_untrained |= allow_untrained;
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            let ds = Dataset::load(&data)?;
            let m = load_model(&model)?;
            if let Some(layer) = &cfg.gradram.target_layer {
                m.config.layer_index(layer)?;
            }
            if !m.trained && !cfg.gradram.allow_untrained {
                return Err(Error::Untrained);
            }
            let split: Split = split.into();
            let samples = ds.split(split);
            let set = SampleSet::from_dataset(&ds, split)?;
            let groups: Vec<String> = match group_by {
                Grouping::Age => {
                    let all: Vec<String> = cfg.gradram.age_bins.iter().map(|&a| age_group(a, &cfg.gradram.age_bins)).collect();
                    let groups: Vec<String> = set.ages.iter().map(|&a| age_group(a, &cfg.gradram.age_bins)).collect();
                    for g in all.iter().filter(|g| !groups.contains(g)) {
                        warn!("age group {g} has no subjects; skipped");
                    }
                    groups
                }
                Grouping::Sex => samples.iter().map(|s| s.sex.as_str().to_string()).collect(),
            };
            echo_config(&cfg, &out)?;
            let name = model_name(&model);
            let study = saliency_study(&m, &name, &ds.info, &samples, &set, &groups, &cfg.gradram)?;
            for (g, avg) in &study.averages {
                avg.write(&out.join(format!("group_{g}.rvol")))?;
                let atlas = &study.atlases[g];
                let labels = atlas.labels.iter().map(|&l| l as f32).collect();
                write_volume(&out.join(format!("atlas_{g}.rvol")), &Volume::new(atlas.dims, avg.spacing, labels)?)?;
            }
            for row in &study.summary.groups {
                row.parcels.write_csv(&out.join(format!("parcels_{}.csv", row.group)))?;
                println!("{} (n = {}): informative mass {:.3}", row.group, row.count, row.informative_mass);
            }
            write_json(&out.join("localization.json"), &study.summary)?;
            println!("overall informative mass {:.3}", study.summary.informative_mass);
        }
        Command::Sweep { axis, values } => {
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            for &v in &values {
                rankage::experiment::sweep_config(&cfg, axis, v)?;
            }
            echo_config(&cfg, &out)?;
            let summary = run_sweep(&cfg, axis, &values, Some(&out))?;
            print!("{}", summary.to_csv());
        }
        Command::Report => {
            let out = out_dir(&cfg)?;
            let spec: BenchmarkSpec = rankage::util::read_json(&out.join("spec.json"))?;
            spec.validate()?;
            let rep = benchmark::report(&spec, &out)?;
            print!("{}", benchmark::markdown(&rep));
        }
        Command::Benchmark {
            seeds,
            delta,
            cohort_size,
        } => {
            let mut spec = BenchmarkSpec {
                base: cfg.clone(),
                ..BenchmarkSpec::default()
            };
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(d) = delta {
                spec.delta = d;
            }
            if let Some(c) = cohort_size {
                spec.cohort_size = c;
            }
            spec.validate()?;
            let out = out_dir(&cfg)?;
            echo_config(&cfg, &out)?;
            info!("benchmark over seeds {:?}", spec.seeds);
            let rep = benchmark::run_benchmark(&spec, &out)?;
            print!("{}", benchmark::markdown(&rep));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
