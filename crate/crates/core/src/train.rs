//! The two training pipelines, their history and resumable state.
//!
//! Both pipelines draw the epoch shuffle from `(seed, epoch)` and every
//! augmentation from `(augment seed, training seed, epoch, sample seed, view)`,
//! so they see identical data streams and an interrupted run resumes exactly.
//! Labels are standardized with the training-split mean and standard
//! deviation; the head stores its parameters in that scale.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use rankage_autodiff::{Tape, Tensor, Var};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::encoder::{is_head_param, EncoderConfig, Mode, Model, NamedTensors};
use crate::error::{Error, Result};
use crate::optim::{scheduled_lr, Adam, Sgd};
use crate::phantom::{Dataset, DatasetInfo, LabeledSample, Split, Volume};
use crate::rnc::{l1_loss_on_tape, rnc_batch_loss, rnc_loss_on_tape, BatchMode, EmbeddingBatch, RncConfig};
use crate::util::{atomic_write, mean_std, rng_for, sha256_hex, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    RncTwoStage,
    EndToEnd,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::RncTwoStage => "rnc-two-stage",
            Pipeline::EndToEnd => "end-to-end",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnc-two-stage" => Ok(Pipeline::RncTwoStage),
            "end-to-end" => Ok(Pipeline::EndToEnd),
            other => Err(Error::invalid(
                "pipeline",
                format!("{other:?} is not rnc-two-stage or end-to-end"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub pipeline: Pipeline,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_decay: f64,
    pub stage1_momentum: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_decay: f64,
    pub stage2_momentum: f64,
    pub baseline_lr: f64,
    pub baseline_max_epochs: usize,
    pub patience: usize,
    /// Fractions of a stage's epochs after which its rate decays.
    pub milestones: Vec<f64>,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::RncTwoStage,
            batch_size: 16,
            stage1_epochs: 200,
            stage1_lr: 0.5,
            stage1_decay: 0.1,
            stage1_momentum: 0.9,
            stage2_epochs: 50,
            stage2_lr: 0.05,
            stage2_decay: 0.2,
            stage2_momentum: 0.9,
            baseline_lr: 0.001,
            baseline_max_epochs: 200,
            patience: 30,
            milestones: vec![0.6, 0.8],
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("training config", d));
        for (name, lr) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("baseline_lr", self.baseline_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} = {lr} must be > 0"));
            }
        }
        for (name, m) in [("stage1_momentum", self.stage1_momentum), ("stage2_momentum", self.stage2_momentum)] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} = {m} outside [0, 1)"));
            }
        }
        for (name, d) in [("stage1_decay", self.stage1_decay), ("stage2_decay", self.stage2_decay)] {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("{name} = {d} outside (0, 1]"));
            }
        }
        if self.patience < 1 {
            return bad("patience must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} below 2", self.batch_size));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || self.milestones.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("milestones {:?} must be ordered fractions", self.milestones));
        }
        Ok(())
    }
}

/// In-memory volumes with labels and per-sample seeds.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub volumes: Vec<Volume>,
    pub ages: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, s: &LabeledSample, v: Volume) {
        self.ids.push(s.id.clone());
        self.ages.push(s.age);
        self.seeds.push(s.seed);
        self.volumes.push(v);
    }

    /// Reads one split of a dataset directory.
    pub fn from_dataset(ds: &Dataset, split: Split) -> Result<Self> {
        let mut set = Self::default();
        for s in ds.split(split) {
            set.push(s, ds.read(s)?);
        }
        Ok(set)
    }

    /// Renders samples directly from their generation parameters.
    pub fn render(info: &DatasetInfo, samples: &[&LabeledSample]) -> Result<Self> {
        let mut set = Self::default();
        for s in samples {
            set.push(s, info.render(s)?.0);
        }
        Ok(set)
    }

    pub fn refs(&self) -> Vec<&Volume> {
        self.volumes.iter().collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: SampleSet,
    pub val: SampleSet,
}

impl TrainData {
    /// Renders the train and validation splits of a manifest in memory.
    pub fn render(info: &DatasetInfo, samples: &[LabeledSample]) -> Result<Self> {
        let pick = |split| samples.iter().filter(|s| s.split == split).collect::<Vec<_>>();
        Ok(Self {
            train: SampleSet::render(info, &pick(Split::Train))?,
            val: SampleSet::render(info, &pick(Split::Val))?,
        })
    }

    pub fn load(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            train: SampleSet::from_dataset(ds, Split::Train)?,
            val: SampleSet::from_dataset(ds, Split::Val)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    /// Validation RNC loss in stage 1 of the two-stage pipeline, validation MAE otherwise.
    pub val_metric: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,stage,train_loss,val_metric,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.stage, r.train_loss, r.val_metric, r.lr));
    }
    out
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    atomic_write(path, history_csv(rows).as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    pipeline: Pipeline,
    fingerprint: String,
    stage: u8,
    /// Epochs completed in the current stage.
    epoch: usize,
    history: Vec<HistoryRow>,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    stopped_epoch: Option<usize>,
    adam_step: u64,
}

/// Where and how often to checkpoint, what to resume from, and an optional
/// budget of epochs for this invocation.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub epoch_budget: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_epoch: Option<usize>,
    /// Epoch at which early stopping fired.
    pub stopped_epoch: Option<usize>,
    /// False when the epoch budget ran out first.
    pub completed: bool,
    /// Resumable state at return.
    pub checkpoint: Checkpoint,
}

fn fingerprint(pipeline: Pipeline, parts: &[serde_json::Value], data: &TrainData) -> String {
    let doc = serde_json::json!({
        "pipeline": pipeline,
        "parts": parts,
        "train": data.train.ids,
        "val": data.val.ids,
    });
    sha256_hex(doc.to_string().as_bytes())
}

/// Shuffled batches; a trailing singleton joins the previous batch.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, stream: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[tag(stream), epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn augmented(set: &SampleSet, i: usize, aug: &AugmentConfig, seed: u64, epoch: usize, view: u64) -> Result<Volume> {
    let mut rng = rng_for(aug.seed, &[tag("augment"), seed, epoch as u64, set.seeds[i], view]);
    augment(&set.volumes[i], aug, &mut rng)
}

fn subset(model: &Model, pick: impl Fn(&str) -> bool) -> (Vec<usize>, NamedTensors) {
    let mut idx = Vec::new();
    let mut like = NamedTensors::default();
    for (i, (n, t)) in model.params.iter().enumerate() {
        if pick(n) {
            idx.push(i);
            like.push(n, t.clone());
        }
    }
    (idx, like)
}

fn gather_grads(tape_grads: &rankage_autodiff::Gradients<f32>, vars: &[Var], idx: &[usize], model: &Model) -> Vec<Tensor<f32>> {
    idx.iter()
        .map(|&i| {
            tape_grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.params.tensors()[i].shape()))
        })
        .collect()
}

fn params_mut<'a>(model: &'a mut Model, idx: &[usize]) -> Vec<&'a mut Tensor<f32>> {
    model
        .params
        .tensors_mut()
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| idx.contains(i))
        .map(|(_, t)| t)
        .collect()
}

fn standardize(model: &mut Model, ages: &[f64]) -> Result<()> {
    let (mean, std) = mean_std(ages);
    if !(std > 0.0) {
        return Err(Error::ZeroVariance { what: "training ages" });
    }
    model.label_mean = mean;
    model.label_std = std;
    for name in ["head.w", "head.b"] {
        let t = model.params.get_mut(name).expect("head parameter");
        *t = Tensor::zeros(t.shape());
    }
    Ok(())
}

/// Per-dimension mean and scale; the scale is the std times √d so that a
/// standardized embedding has unit RMS norm. Constant dimensions keep scale √d.
fn feature_stats(emb: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let d = emb.first().map_or(0, Vec::len);
    let root = (d as f64).sqrt();
    (0..d)
        .map(|j| {
            let col: Vec<f64> = emb.iter().map(|e| e[j] as f64).collect();
            let (m, s) = mean_std(&col);
            (m, if s > 1e-8 { s * root } else { root })
        })
        .unzip()
}

/// Model head (standardized label units) expressed on standardized features.
fn whitened_head(model: &Model, mu: &[f64], sd: &[f64]) -> Result<NamedTensors> {
    let w = model.params.get("head.w").expect("head weight").data();
    let b = model.params.get("head.b").expect("head bias").data()[0] as f64;
    let ws: Vec<f32> = w.iter().zip(sd).map(|(&v, s)| (v as f64 * s) as f32).collect();
    let bs = b + w.iter().zip(mu).map(|(&v, m)| v as f64 * m).sum::<f64>();
    let mut out = NamedTensors::default();
    out.push("head.w", Tensor::new(vec![ws.len(), 1], ws)?);
    out.push("head.b", Tensor::new(vec![1], vec![bs as f32])?);
    Ok(out)
}

fn fold_head(model: &mut Model, head: &NamedTensors, mu: &[f64], sd: &[f64]) -> Result<()> {
    let ws = head.tensors()[0].data();
    let bs = head.tensors()[1].data()[0] as f64;
    let w: Vec<f32> = ws.iter().zip(sd).map(|(&v, s)| (v as f64 / s) as f32).collect();
    let b = bs - ws.iter().zip(mu).zip(sd).map(|((&v, m), s)| v as f64 * m / s).sum::<f64>();
    *model.params.get_mut("head.w").expect("head weight") = Tensor::new(vec![w.len(), 1], w)?;
    *model.params.get_mut("head.b").expect("head bias") = Tensor::new(vec![1], vec![b as f32])?;
    Ok(())
}

fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

const EVAL_CHUNK: usize = 16;

struct Runner<'a> {
    cfg: &'a TrainingConfig,
    opts: &'a RunOptions,
    model: Model,
    state: TrainerState,
    opt_state: NamedTensors,
    best: NamedTensors,
    epochs_run: usize,
}

impl Runner<'_> {
    fn checkpoint(&self) -> Checkpoint {
        let state = serde_json::to_value(&self.state).expect("state serializes");
        let mut ck = Checkpoint::from_model(&self.model, state);
        ck.add_group("opt", &self.opt_state);
        ck.add_group("best", &self.best);
        ck
    }

    /// Records an epoch; returns false when the budget is exhausted.
    fn finish_epoch(&mut self, row: HistoryRow) -> Result<bool> {
        info!(
            "{} stage {} epoch {}: train {:.5} val {:.5} lr {}",
            self.state.pipeline, row.stage, row.epoch, row.train_loss, row.val_metric, row.lr
        );
        self.state.history.push(row);
        self.state.epoch += 1;
        self.epochs_run += 1;
        let every = self.cfg.checkpoint_every;
        let budget_hit = self.opts.epoch_budget.is_some_and(|b| self.epochs_run >= b);
        if let Some(path) = &self.opts.checkpoint_path {
            if budget_hit || (every > 0 && self.state.history.len().is_multiple_of(every)) {
                self.checkpoint().write(path)?;
            }
        }
        Ok(!budget_hit)
    }

    fn outcome(self, completed: bool) -> TrainOutcome {
        let checkpoint = self.checkpoint();
        TrainOutcome {
            history: self.state.history.clone(),
            best_epoch: self.state.best_epoch,
            stopped_epoch: self.state.stopped_epoch,
            completed,
            checkpoint,
            model: self.model,
        }
    }
}

fn start<'a>(
    pipeline: Pipeline,
    data: &TrainData,
    encoder: &EncoderConfig,
    parts: &[serde_json::Value],
    aug: &AugmentConfig,
    cfg: &'a TrainingConfig,
    opts: &'a RunOptions,
) -> Result<Runner<'a>> {
    cfg.validate()?;
    aug.validate()?;
    encoder.validate()?;
    if data.train.len() < 2 {
        return Err(Error::Empty {
            what: "training split (need at least 2 samples)".into(),
        });
    }
    if data.val.is_empty() {
        return Err(Error::Empty { what: "validation split".into() });
    }
    let fp = fingerprint(pipeline, parts, data);
    if let Some(ck) = &opts.resume {
        let state: TrainerState = serde_json::from_value(ck.header.state.clone())
            .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
        if state.fingerprint != fp {
            return Err(Error::Checkpoint("checkpoint belongs to a different configuration or dataset".into()));
        }
        return Ok(Runner {
            cfg,
            opts,
            model: ck.model()?,
            state,
            opt_state: ck.group("opt"),
            best: ck.group("best"),
            epochs_run: 0,
        });
    }
    Ok(Runner {
        cfg,
        opts,
        model: Model::new(encoder.clone())?,
        state: TrainerState {
            pipeline,
            fingerprint: fp,
            stage: 1,
            epoch: 0,
            history: Vec::new(),
            best_val: None,
            best_epoch: None,
            bad_epochs: 0,
            stopped_epoch: None,
            adam_step: 0,
        },
        opt_state: NamedTensors::default(),
        best: NamedTensors::default(),
        epochs_run: 0,
    })
}

/// Stage 1: encoder under the RNC loss with augmentation. Stage 2: frozen
/// encoder, head fitted under L1 on precomputed eval-mode embeddings.
pub fn train_rnc_two_stage(
    data: &TrainData,
    encoder: &EncoderConfig,
    rnc: &RncConfig,
    aug: &AugmentConfig,
    cfg: &TrainingConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    rnc.validate()?;
    if data.val.len() < 2 {
        return Err(Error::Empty {
            what: "validation split (RNC monitoring needs at least 2 samples)".into(),
        });
    }
    let parts = [
        serde_json::to_value(encoder).expect("serializable"),
        serde_json::to_value(rnc).expect("serializable"),
        serde_json::to_value(aug).expect("serializable"),
        serde_json::to_value(cfg).expect("serializable"),
    ];
    let mut r = start(Pipeline::RncTwoStage, data, encoder, &parts, aug, cfg, opts)?;
    let views: u64 = match rnc.batch_mode {
        BatchMode::DistinctSamples => 1,
        BatchMode::TwoViews => 2,
    };

    if r.state.stage == 1 {
        let (idx, like) = subset(&r.model, |n| !is_head_param(n));
        let mut sgd = Sgd::new(cfg.stage1_lr, cfg.stage1_momentum, &like)?;
        if !r.opt_state.is_empty() {
            sgd.buffers = r.opt_state.clone();
        }
        while r.state.epoch < cfg.stage1_epochs {
            let epoch = r.state.epoch + 1;
            sgd.lr = scheduled_lr(cfg.stage1_lr, cfg.stage1_decay, &cfg.milestones, cfg.stage1_epochs, epoch);
            let mut losses = Vec::new();
            for batch in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, "shuffle", epoch) {
                let mut vols = Vec::with_capacity(batch.len() * views as usize);
                let mut labels = Vec::with_capacity(vols.capacity());
                for &i in &batch {
                    for view in 0..views {
                        vols.push(augmented(&data.train, i, aug, cfg.seed, epoch, view)?);
                        labels.push(data.train.ages[i]);
                    }
                }
                let refs: Vec<&Volume> = vols.iter().collect();
                let mut tape = Tape::<f32>::new();
                let vars = r.model.bind(&mut tape, |n| !is_head_param(n));
                let x = tape.constant(r.model.input_tensor(&refs)?);
                let trace = r.model.forward(&mut tape, &vars, x, Mode::Train)?;
                let loss = rnc_loss_on_tape(&mut tape, trace.embedding, &labels, rnc)?;
                losses.push(tape.value(loss).data()[0] as f64);
                let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
                let g = gather_grads(&grads, &vars, &idx, &r.model);
                let grefs: Vec<&Tensor<f32>> = g.iter().collect();
                sgd.step(&mut params_mut(&mut r.model, &idx), &grefs)?;
                r.model.update_running_stats(&tape, &trace);
            }
            let (emb, _) = r.model.infer(&data.val.refs(), EVAL_CHUNK)?;
            let emb64 = emb.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
            let val = rnc_batch_loss(&EmbeddingBatch::new(emb64, data.val.ages.clone())?, rnc)?;
            r.opt_state = sgd.buffers.clone();
            let row = HistoryRow {
                epoch,
                stage: 1,
                train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                val_metric: val,
                lr: sgd.lr,
            };
            if !r.finish_epoch(row)? {
                return Ok(r.outcome(false));
            }
        }
        r.state.stage = 2;
        r.state.epoch = 0;
        r.opt_state = NamedTensors::default();
        standardize(&mut r.model, &data.train.ages)?;
    }

    // The head is optimized on per-dimension standardized embeddings and
    // folded back into raw-embedding weights after every epoch.
    let (raw_train, _) = r.model.infer(&data.train.refs(), EVAL_CHUNK)?;
    let (val_emb, _) = r.model.infer(&data.val.refs(), EVAL_CHUNK)?;
    let (feat_mu, feat_sd) = feature_stats(&raw_train);
    let train_emb: Vec<Vec<f32>> = raw_train
        .iter()
        .map(|e| e.iter().zip(&feat_mu).zip(&feat_sd).map(|((&v, m), s)| ((v as f64 - m) / s) as f32).collect())
        .collect();
    let mut head = r.opt_state.group_prefix("head");
    if head.is_empty() {
        head = whitened_head(&r.model, &feat_mu, &feat_sd)?;
    }
    let mut sgd = Sgd::new(cfg.stage2_lr, cfg.stage2_momentum, &head)?;
    let buffers = r.opt_state.group_prefix("momentum");
    if !buffers.is_empty() {
        sgd.buffers = buffers;
    }
    let d = r.model.config.embedding_dim;
    let (mu, sigma) = (r.model.label_mean, r.model.label_std);
    while r.state.epoch < cfg.stage2_epochs {
        let epoch = r.state.epoch + 1;
        sgd.lr = scheduled_lr(cfg.stage2_lr, cfg.stage2_decay, &cfg.milestones, cfg.stage2_epochs, epoch);
        let mut losses = Vec::new();
        for batch in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, "shuffle-head", epoch) {
            let mut tape = Tape::<f32>::new();
            let flat = batch.iter().flat_map(|&i| train_emb[i].iter().copied()).collect();
            let e = tape.constant(Tensor::new(vec![batch.len(), d], flat)?);
            let w = tape.param(head.tensors()[0].clone());
            let b = tape.param(head.tensors()[1].clone());
            let raw = tape.dense(e, w, Some(b))?;
            let raw = tape.reshape(raw, vec![batch.len()])?;
            let targets: Vec<f64> = batch.iter().map(|&i| (data.train.ages[i] - mu) / sigma).collect();
            let loss = l1_loss_on_tape(&mut tape, raw, &targets)?;
            losses.push(tape.value(loss).data()[0] as f64 * sigma);
            let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
            let g = [grads.get(w).expect("grad").clone(), grads.get(b).expect("grad").clone()];
            let mut hp: Vec<&mut Tensor<f32>> = head.tensors_mut().iter_mut().collect();
            sgd.step(&mut hp, &[&g[0], &g[1]])?;
        }
        fold_head(&mut r.model, &head, &feat_mu, &feat_sd)?;
        let fitted = r.model.head();
        let preds: Vec<f64> = val_emb
            .iter()
            .map(|e| e.iter().zip(&fitted.weight).map(|(&v, w)| v as f64 * w).sum::<f64>() + fitted.bias)
            .collect();
        r.opt_state = NamedTensors::default();
        for (prefix, group) in [("head", &head), ("momentum", &sgd.buffers)] {
            for (n, t) in group.iter() {
                r.opt_state.push(format!("{prefix}/{n}"), t.clone());
            }
        }
        let row = HistoryRow {
            epoch,
            stage: 2,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_metric: mae(&preds, &data.val.ages),
            lr: sgd.lr,
        };
        if r.state.epoch + 1 == cfg.stage2_epochs {
            r.model.trained = true;
        }
        if !r.finish_epoch(row)? {
            let done = r.state.epoch >= cfg.stage2_epochs;
            return Ok(r.outcome(done));
        }
    }
    r.model.trained = true;
    Ok(r.outcome(true))
}

/// Encoder and head jointly under L1 with Adam, early stopping on validation
/// MAE and restoring the best epoch's weights.
pub fn train_end_to_end(
    data: &TrainData,
    encoder: &EncoderConfig,
    aug: &AugmentConfig,
    cfg: &TrainingConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let parts = [
        serde_json::to_value(encoder).expect("serializable"),
        serde_json::to_value(aug).expect("serializable"),
        serde_json::to_value(cfg).expect("serializable"),
    ];
    let mut r = start(Pipeline::EndToEnd, data, encoder, &parts, aug, cfg, opts)?;
    if r.state.history.is_empty() && r.state.epoch == 0 {
        standardize(&mut r.model, &data.train.ages)?;
    }
    let (idx, like) = subset(&r.model, |_| true);
    let mut adam = Adam::new(cfg.baseline_lr, &like)?;
    if !r.opt_state.is_empty() {
        adam.m = r.opt_state.group_prefix("m");
        adam.v = r.opt_state.group_prefix("v");
        adam.step = r.state.adam_step;
    }
    while r.state.stopped_epoch.is_none() && r.state.epoch < cfg.baseline_max_epochs {
        let epoch = r.state.epoch + 1;
        let mut losses = Vec::new();
        for batch in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, "shuffle", epoch) {
            let vols = batch
                .iter()
                .map(|&i| augmented(&data.train, i, aug, cfg.seed, epoch, 0))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<f64> = batch.iter().map(|&i| data.train.ages[i]).collect();
            let refs: Vec<&Volume> = vols.iter().collect();
            let mut tape = Tape::<f32>::new();
            let vars = r.model.bind(&mut tape, |_| true);
            let x = tape.constant(r.model.input_tensor(&refs)?);
            let trace = r.model.forward(&mut tape, &vars, x, Mode::Train)?;
            let loss = l1_loss_on_tape(&mut tape, trace.prediction, &labels)?;
            losses.push(tape.value(loss).data()[0] as f64);
            let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
            let g = gather_grads(&grads, &vars, &idx, &r.model);
            let grefs: Vec<&Tensor<f32>> = g.iter().collect();
            adam.step(&mut params_mut(&mut r.model, &idx), &grefs)?;
            r.model.update_running_stats(&tape, &trace);
        }
        let (_, preds) = r.model.infer(&data.val.refs(), EVAL_CHUNK)?;
        let val = mae(&preds, &data.val.ages);
        if r.state.best_val.is_none_or(|b| val < b) {
            r.state.best_val = Some(val);
            r.state.best_epoch = Some(epoch);
            r.state.bad_epochs = 0;
            r.best = snapshot(&r.model);
        } else {
            r.state.bad_epochs += 1;
            if r.state.bad_epochs >= cfg.patience {
                r.state.stopped_epoch = Some(epoch);
            }
        }
        let mut opt = NamedTensors::default();
        for (n, t) in adam.m.iter() {
            opt.push(format!("m/{n}"), t.clone());
        }
        for (n, t) in adam.v.iter() {
            opt.push(format!("v/{n}"), t.clone());
        }
        r.opt_state = opt;
        r.state.adam_step = adam.step;
        let row = HistoryRow {
            epoch,
            stage: 1,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_metric: val,
            lr: adam.lr,
        };
        let finished = r.state.stopped_epoch.is_some() || epoch == cfg.baseline_max_epochs;
        if finished {
            restore(&mut r.model, &r.best)?;
            r.model.trained = true;
        }
        if !r.finish_epoch(row)? {
            return Ok(r.outcome(finished));
        }
    }
    Ok(r.outcome(true))
}

fn snapshot(model: &Model) -> NamedTensors {
    let mut s = NamedTensors::default();
    for (n, t) in model.params.iter() {
        s.push(format!("param/{n}"), t.clone());
    }
    for (n, t) in model.buffers.iter() {
        s.push(format!("buffer/{n}"), t.clone());
    }
    s
}

fn restore(model: &mut Model, best: &NamedTensors) -> Result<()> {
    if best.is_empty() {
        return Ok(());
    }
    for (n, t) in best.iter() {
        let slot = if let Some(p) = n.strip_prefix("param/") {
            model.params.get_mut(p)
        } else if let Some(b) = n.strip_prefix("buffer/") {
            model.buffers.get_mut(b)
        } else {
            None
        };
        *slot.ok_or_else(|| Error::Checkpoint(format!("unknown snapshot tensor {n}")))? = t.clone();
    }
    Ok(())
}

/// Dispatches on `cfg.pipeline`.
pub fn train(
    data: &TrainData,
    encoder: &EncoderConfig,
    rnc: &RncConfig,
    aug: &AugmentConfig,
    cfg: &TrainingConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    match cfg.pipeline {
        Pipeline::RncTwoStage => train_rnc_two_stage(data, encoder, rnc, aug, cfg, opts),
        Pipeline::EndToEnd => train_end_to_end(data, encoder, aug, cfg, opts),
    }
}

/// Appends a line to a plain-text log next to training outputs.
pub fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomConfig, SplitRatios};

    fn tiny() -> (TrainData, EncoderConfig, TrainingConfig) {
        let ph = PhantomConfig {
            head_radius_jitter: 0.0,
            ..PhantomConfig::default().scaled_to([16, 16, 16])
        };
        let samples = generate_dataset(20, &ph, SplitRatios::default(), 3).unwrap();
        let data = TrainData::render(&DatasetInfo::new(ph), &samples).unwrap();
        let enc = EncoderConfig {
            input_dims: [16, 16, 16],
            widths: vec![4, 8, 8],
            embedding_dim: 8,
            ..EncoderConfig::default()
        };
        let cfg = TrainingConfig {
            batch_size: 6,
            stage1_epochs: 3,
            stage1_lr: 0.05,
            stage2_epochs: 3,
            baseline_max_epochs: 4,
            checkpoint_every: 0,
            ..TrainingConfig::default()
        };
        (data, enc, cfg)
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let b = epoch_batches(9, 4, 1, "shuffle", 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_ne!(epoch_batches(9, 4, 1, "shuffle", 1), epoch_batches(9, 4, 1, "shuffle", 2));
    }

    #[test]
    fn stage_two_leaves_encoder_untouched() {
        let (data, enc, cfg) = tiny();
        let (rnc, aug) = (RncConfig::default(), AugmentConfig::default());
        let only1 = train_rnc_two_stage(&data, &enc, &rnc, &aug, &TrainingConfig { stage2_epochs: 0, ..cfg.clone() }, &RunOptions::default()).unwrap();
        let full = train_rnc_two_stage(&data, &enc, &rnc, &aug, &cfg, &RunOptions::default()).unwrap();
        assert!(full.completed && full.model.trained);
        assert_eq!(only1.model.encoder_checksum(), full.model.encoder_checksum());
        let stages: Vec<u8> = full.history.iter().map(|r| r.stage).collect();
        assert_eq!(stages, [1, 1, 1, 2, 2, 2]);
        assert!(full.history.iter().all(|r| r.train_loss.is_finite() && r.val_metric.is_finite()));
    }

    #[test]
    fn interrupted_runs_resume_bit_exactly() {
        let (data, enc, cfg) = tiny();
        let (rnc, aug) = (RncConfig::default(), AugmentConfig::default());
        let full = train_rnc_two_stage(&data, &enc, &rnc, &aug, &cfg, &RunOptions::default()).unwrap();
        // Interrupt once inside stage 1 and once at the stage boundary.
        let mut ck = None;
        let mut done = false;
        for budget in [2, 1, 10] {
            let opts = RunOptions { resume: ck.take(), epoch_budget: Some(budget), ..RunOptions::default() };
            let out = train_rnc_two_stage(&data, &enc, &rnc, &aug, &cfg, &opts).unwrap();
            let bytes = out.checkpoint.to_bytes().unwrap();
            ck = Some(Checkpoint::from_bytes(&bytes).unwrap());
            if out.completed {
                done = true;
                assert_eq!(out.history, full.history);
                assert_eq!(bytes, full.checkpoint.to_bytes().unwrap());
            }
        }
        assert!(done);

        let e2e = train_end_to_end(&data, &enc, &aug, &cfg, &RunOptions::default()).unwrap();
        let part = train_end_to_end(&data, &enc, &aug, &cfg, &RunOptions { epoch_budget: Some(2), ..RunOptions::default() }).unwrap();
        assert!(!part.completed);
        let rest = train_end_to_end(&data, &enc, &aug, &cfg, &RunOptions { resume: Some(part.checkpoint), ..RunOptions::default() }).unwrap();
        assert_eq!(rest.checkpoint.to_bytes().unwrap(), e2e.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn resume_rejects_other_configuration() {
        let (data, enc, cfg) = tiny();
        let aug = AugmentConfig::default();
        let part = train_end_to_end(&data, &enc, &aug, &cfg, &RunOptions { epoch_budget: Some(1), ..RunOptions::default() }).unwrap();
        let other = TrainingConfig { seed: 9, ..cfg };
        let err = train_end_to_end(&data, &enc, &aug, &other, &RunOptions { resume: Some(part.checkpoint), ..RunOptions::default() });
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let (data, enc, cfg) = tiny();
        let cfg = TrainingConfig { patience: 1, baseline_max_epochs: 30, baseline_lr: 0.05, ..cfg };
        let out = train_end_to_end(&data, &enc, &AugmentConfig::default(), &cfg, &RunOptions::default()).unwrap();
        let best = out.best_epoch.unwrap();
        let stop = out.stopped_epoch.expect("patience of one stops early");
        assert_eq!(stop, out.history.len());
        let best_val = out.history[best - 1].val_metric;
        assert!(out.history.iter().all(|r| r.val_metric >= best_val));
        let (_, preds) = out.model.infer(&data.val.refs(), 4).unwrap();
        assert!((mae(&preds, &data.val.ages) - best_val).abs() < 1e-9);
    }

    #[test]
    fn history_csv_layout() {
        let rows = [HistoryRow { epoch: 1, stage: 2, train_loss: 0.5, val_metric: 1.25, lr: 0.05 }];
        assert_eq!(history_csv(&rows), "epoch,stage,train_loss,val_metric,lr\n1,2,0.5,1.25,0.05\n");
    }

    #[test]
    fn folded_head_predicts_like_the_standardized_one() {
        let (_, enc, _) = tiny();
        let mut model = Model::new(EncoderConfig { embedding_dim: 3, ..enc }).unwrap();
        let emb = vec![vec![1.0f32, 5.0, -2.0], vec![2.0, 4.0, -2.0], vec![0.5, 7.0, -2.0]];
        let (mu, sd) = feature_stats(&emb);
        assert_eq!(sd[2], 3f64.sqrt());
        let mut head = NamedTensors::default();
        head.push("head.w", Tensor::new(vec![3, 1], vec![0.3, -1.2, 0.7]).unwrap());
        head.push("head.b", Tensor::new(vec![1], vec![0.25]).unwrap());
        fold_head(&mut model, &head, &mu, &sd).unwrap();
        let w = model.params.get("head.w").unwrap().data().to_vec();
        let b = model.params.get("head.b").unwrap().data()[0] as f64;
        for e in &emb {
            let raw: f64 = e.iter().zip(&w).map(|(&x, &w)| x as f64 * w as f64).sum::<f64>() + b;
            let std: f64 = e
                .iter()
                .zip(head.tensors()[0].data())
                .enumerate()
                .map(|(j, (&x, &w))| (x as f64 - mu[j]) / sd[j] * w as f64)
                .sum::<f64>()
                + 0.25;
            assert!((raw - std).abs() < 1e-5, "{raw} vs {std}");
        }
        let back = whitened_head(&model, &mu, &sd).unwrap();
        for (a, b) in back.tensors().iter().zip(head.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
