//! Small residual 3D encoder with an affine age head.
//!
//! Layout: stem (conv-BN-ReLU) → stages of basic residual blocks → global
//! average pooling → dense projection to `d` → optional L2 normalization.
//! The head maps embeddings to years as `ŷ = σ·(w'·v + b') + μ`, where
//! `(μ, σ)` is the label scale fixed by the trainer (identity by default).

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use rankage_autodiff::{BatchNormMode, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::phantom::Volume;
use crate::util::{rng_for, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input volume dims `[nx, ny, nz]`.
    pub input_dims: [usize; 3],
    /// Output channels of each residual stage; the stem uses the first width.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_stride: usize,
    pub stage_strides: Vec<usize>,
    pub embedding_dim: usize,
    pub normalize_embedding: bool,
    /// Weight kept by the running statistics at each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 32, 32],
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            stem_stride: 2,
            stage_strides: vec![2, 2, 1],
            embedding_dim: 64,
            normalize_embedding: false,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("encoder config", d));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths {:?} must be non-empty and positive", self.widths));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("widths {:?} must be nondecreasing", self.widths));
        }
        if self.stage_strides.len() != self.widths.len() || self.stage_strides.contains(&0) || self.stem_stride == 0 {
            return bad(format!(
                "need one positive stride per stage, got {:?} for {} stages",
                self.stage_strides,
                self.widths.len()
            ));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be ≥ 1".into());
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding dim {} below 2", self.embedding_dim));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn momentum in [0, 1) and eps > 0 required".into());
        }
        if self.input_dims.iter().any(|&d| d < 4) {
            return bad(format!("input dims {:?} too small", self.input_dims));
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain((1..=self.widths.len()).map(|s| format!("stage{s}")))
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Spatial dims `[D, H, W]` at the output of each layer.
    pub fn layer_dims(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.input_dims;
        let mut d = [nz, ny, nx].map(|e| conv_out(e, self.stem_stride));
        let mut out = vec![d];
        for &s in &self.stage_strides {
            d = d.map(|e| conv_out(e, s));
            out.push(d);
        }
        out
    }

    pub fn last_layer(&self) -> String {
        format!("stage{}", self.widths.len())
    }

    pub fn parameter_count(&self) -> usize {
        Model::new(self.clone()).map(|m| m.parameter_count()).unwrap_or(0)
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedTensors {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl NamedTensors {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    /// Entries named `prefix/...`, with the prefix removed.
    pub fn group_prefix(&self, prefix: &str) -> NamedTensors {
        let p = format!("{prefix}/");
        let mut out = NamedTensors::default();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Order-sensitive hash of every value's bits.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * self.element_count());
        for (n, t) in self.iter() {
            bytes.extend_from_slice(n.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::util::sha256_hex(&bytes)
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Linear regression head in years.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Encoder parameters, batch-norm buffers and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: NamedTensors,
    pub buffers: NamedTensors,
    pub label_mean: f64,
    pub label_std: f64,
    pub trained: bool,
}

/// Nodes recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Output of each layer from the starting layer on, by layer index.
    pub layers: Vec<(usize, Var)>,
    pub embedding: Var,
    /// Predicted age in years, shape `[N]`.
    pub prediction: Var,
    /// Training-mode batch-norm nodes with their buffer prefix.
    pub batch_norms: Vec<(String, Var)>,
}

impl Trace {
    pub fn layer(&self, index: usize) -> Option<Var> {
        self.layers.iter().find(|(i, _)| *i == index).map(|(_, v)| *v)
    }
}

struct Builder<'a, T: Real> {
    model: &'a Model,
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    mode: Mode,
    batch_norms: Vec<(String, Var)>,
}

impl<T: Real> Builder<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.model.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        let eps = self.model.config.bn_eps;
        let y = match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm(x, gamma, beta, BatchNormMode::Train, eps)?;
                self.batch_norms.push((prefix.to_string(), y));
                y
            }
            Mode::Eval => {
                let buf = |s: &str| -> Vec<f64> {
                    let t = self.model.buffers.get(&format!("{prefix}.{s}")).expect("bn buffer");
                    t.data().iter().map(|&v| v as f64).collect()
                };
                let (mean, var) = (buf("mean"), buf("var"));
                self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BatchNormMode::Eval {
                        running_mean: &mean,
                        running_var: &var,
                    },
                    eps,
                )?
            }
        };
        Ok(y)
    }

    fn block(&mut self, x: Var, prefix: &str, stride: usize, shortcut: bool) -> Result<Var> {
        let h = self.tape.conv3d(x, self.p(&format!("{prefix}.conv1.w")), None, stride, 1)?;
        let h = self.bn(h, &format!("{prefix}.bn1"))?;
        let h = self.tape.relu(h)?;
        let h = self.tape.conv3d(h, self.p(&format!("{prefix}.conv2.w")), None, 1, 1)?;
        let h = self.bn(h, &format!("{prefix}.bn2"))?;
        let s = if shortcut {
            let s = self.tape.conv3d(x, self.p(&format!("{prefix}.short.w")), None, stride, 0)?;
            self.bn(s, &format!("{prefix}.short.bn"))?
        } else {
            x
        };
        let sum = self.tape.add(h, s)?;
        Ok(self.tape.relu(sum)?)
    }

    fn layer(&mut self, index: usize, x: Var) -> Result<Var> {
        let cfg = &self.model.config;
        if index == 0 {
            let h = self.tape.conv3d(x, self.p("stem.conv.w"), None, cfg.stem_stride, 1)?;
            let h = self.bn(h, "stem.bn")?;
            return Ok(self.tape.relu(h)?);
        }
        let stride = cfg.stage_strides[index - 1];
        let blocks = cfg.blocks_per_stage;
        let in_ch = if index == 1 { cfg.widths[0] } else { cfg.widths[index - 2] };
        let out_ch = cfg.widths[index - 1];
        let mut h = x;
        for b in 0..blocks {
            let (s, short) = if b == 0 {
                (stride, stride != 1 || in_ch != out_ch)
            } else {
                (1, false)
            };
            h = self.block(h, &format!("stage{index}.block{b}"), s, short)?;
        }
        Ok(h)
    }
}

fn he_normal(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<f32> {
    let mut rng = rng_for(seed, &[tag(name)]);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
}

impl Model {
    /// He-normal initialized model with identity label scale and a zero head.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut params = NamedTensors::default();
        let mut buffers = NamedTensors::default();
        let conv = |params: &mut NamedTensors, name: String, out: usize, inp: usize, k: usize| {
            let t = he_normal(&[out, inp, k, k, k], inp * k * k * k, seed, &name);
            params.push(name, t);
        };
        let bn = |params: &mut NamedTensors, buffers: &mut NamedTensors, prefix: &str, c: usize| {
            params.push(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
            params.push(format!("{prefix}.beta"), Tensor::zeros(&[c]));
            buffers.push(format!("{prefix}.mean"), Tensor::zeros(&[c]));
            buffers.push(format!("{prefix}.var"), Tensor::full(&[c], 1.0));
        };
        let w0 = config.widths[0];
        conv(&mut params, "stem.conv.w".into(), w0, 1, 3);
        bn(&mut params, &mut buffers, "stem.bn", w0);
        let mut in_ch = w0;
        for (s, &out_ch) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let p = format!("stage{}.block{b}", s + 1);
                let cin = if b == 0 { in_ch } else { out_ch };
                conv(&mut params, format!("{p}.conv1.w"), out_ch, cin, 3);
                bn(&mut params, &mut buffers, &format!("{p}.bn1"), out_ch);
                conv(&mut params, format!("{p}.conv2.w"), out_ch, out_ch, 3);
                bn(&mut params, &mut buffers, &format!("{p}.bn2"), out_ch);
                if b == 0 && (config.stage_strides[s] != 1 || cin != out_ch) {
                    conv(&mut params, format!("{p}.short.w"), out_ch, cin, 1);
                    bn(&mut params, &mut buffers, &format!("{p}.short.bn"), out_ch);
                }
            }
            in_ch = out_ch;
        }
        let d = config.embedding_dim;
        params.push("embed.w", he_normal(&[in_ch, d], in_ch, seed, "embed.w"));
        let bound = 1.0 / (in_ch as f64).sqrt();
        let mut rng = rng_for(seed, &[tag("embed.b")]);
        let uni = Uniform::new_inclusive(-bound, bound).expect("ordered bounds");
        params.push("embed.b", Tensor::from_fn(&[d], |_| uni.sample(&mut rng) as f32));
        params.push("head.w", Tensor::zeros(&[d, 1]));
        params.push("head.b", Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params,
            buffers,
            label_mean: 0.0,
            label_std: 1.0,
            trained: false,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn encoder_checksum(&self) -> String {
        let mut enc = NamedTensors::default();
        for (n, t) in self.params.iter().filter(|(n, _)| !is_head_param(n)) {
            enc.push(n, t.clone());
        }
        for (n, t) in self.buffers.iter() {
            enc.push(n, t.clone());
        }
        enc.checksum()
    }

    pub fn head(&self) -> RegressionHead {
        let w = self.params.get("head.w").expect("head weight");
        let b = self.params.get("head.b").expect("head bias");
        RegressionHead {
            weight: w.data().iter().map(|&v| self.label_std * v as f64).collect(),
            bias: self.label_std * b.data()[0] as f64 + self.label_mean,
        }
    }

    /// Sets the head in years, keeping the current label scale.
    pub fn set_head(&mut self, head: &RegressionHead) -> Result<()> {
        let d = self.config.embedding_dim;
        if head.weight.len() != d || !head.bias.is_finite() || head.weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("head", format!("need {d} finite weights and a finite bias")));
        }
        let s = self.label_std;
        let w = head.weight.iter().map(|&v| (v / s) as f32).collect();
        *self.params.get_mut("head.w").expect("head weight") = Tensor::new(vec![d, 1], w)?;
        *self.params.get_mut("head.b").expect("head bias") = Tensor::scalar(((head.bias - self.label_mean) / s) as f32).reshape(vec![1])?;
        Ok(())
    }

    /// Leaves for every parameter; `trainable` decides which require gradients.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(n, t)| tape.leaf(t.cast::<T>(), trainable(n)))
            .collect()
    }

    /// Batched input `[N, 1, nz, ny, nx]`.
    pub fn input_tensor<T: Real>(&self, volumes: &[&Volume]) -> Result<Tensor<T>> {
        let [nx, ny, nz] = self.config.input_dims;
        let mut data = Vec::with_capacity(volumes.len() * nx * ny * nz);
        for v in volumes {
            if v.dims() != self.config.input_dims {
                return Err(Error::invalid(
                    "encoder input",
                    format!("volume dims {:?} vs configured {:?}", v.dims(), self.config.input_dims),
                ));
            }
            data.extend(v.voxels().iter().map(|&x| T::from_f64_lossy(x as f64)));
        }
        if volumes.is_empty() {
            return Err(Error::Empty { what: "encoder batch".into() });
        }
        Ok(Tensor::new(vec![volumes.len(), 1, nz, ny, nx], data)?)
    }

    /// Runs layers `from..` on `x` (the input when `from == 0`, else the
    /// output of layer `from − 1`) through the embedding and head.
    pub fn forward_from<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, from: usize, mode: Mode) -> Result<Trace> {
        let n_layers = self.config.widths.len() + 1;
        if from > n_layers {
            return Err(Error::invalid("forward", format!("start layer {from} beyond {n_layers} layers")));
        }
        let mut b = Builder {
            model: self,
            tape,
            vars,
            mode,
            batch_norms: Vec::new(),
        };
        let mut h = x;
        let mut layers = Vec::new();
        for i in from..n_layers {
            h = b.layer(i, h)?;
            layers.push((i, h));
        }
        let pooled = b.tape.global_avg_pool(h)?;
        let (ew, eb) = (b.p("embed.w"), b.p("embed.b"));
        let mut emb = b.tape.dense(pooled, ew, Some(eb))?;
        if self.config.normalize_embedding {
            emb = b.tape.l2_normalize(emb)?;
        }
        let (hw, hb) = (b.p("head.w"), b.p("head.b"));
        let raw = b.tape.dense(emb, hw, Some(hb))?;
        let n = b.tape.shape(raw)[0];
        let raw = b.tape.reshape(raw, vec![n])?;
        let scaled = b.tape.scale(raw, self.label_std)?;
        let offset = b.tape.constant(Tensor::full(&[n], T::from_f64_lossy(self.label_mean)));
        let prediction = b.tape.add(scaled, offset)?;
        Ok(Trace {
            layers,
            embedding: emb,
            prediction,
            batch_norms: b.batch_norms,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: Mode) -> Result<Trace> {
        self.forward_from(tape, vars, x, 0, mode)
    }

    /// Folds the batch statistics of a training-mode trace into the running buffers.
    pub fn update_running_stats<T: Real>(&mut self, tape: &Tape<T>, trace: &Trace) {
        let m = self.config.bn_momentum;
        for (prefix, var) in &trace.batch_norms {
            let Some(stats) = tape.batch_stats(*var) else { continue };
            for (suffix, batch) in [("mean", &stats.mean), ("var", &stats.var)] {
                let buf = self.buffers.get_mut(&format!("{prefix}.{suffix}")).expect("bn buffer");
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (m * *r as f64 + (1.0 - m) * b) as f32;
                }
            }
        }
    }

    /// Eval-mode embeddings and predictions, batched `chunk` volumes at a time.
    pub fn infer(&self, volumes: &[&Volume], chunk: usize) -> Result<(Vec<Vec<f32>>, Vec<f64>)> {
        let mut embs = Vec::with_capacity(volumes.len());
        let mut preds = Vec::with_capacity(volumes.len());
        for part in volumes.chunks(chunk.max(1)) {
            let mut tape = Tape::<f32>::new();
            let vars = self.bind(&mut tape, |_| false);
            let x = tape.constant(self.input_tensor(part)?);
            let trace = self.forward(&mut tape, &vars, x, Mode::Eval)?;
            let d = self.config.embedding_dim;
            embs.extend(tape.value(trace.embedding).data().chunks(d).map(<[f32]>::to_vec));
            preds.extend(tape.value(trace.prediction).data().iter().map(|&v| v as f64));
        }
        Ok((embs, preds))
    }

    /// Embedding of one volume. Training mode needs batch statistics and is
    /// therefore rejected for a single volume.
    pub fn embed(&self, volume: &Volume, mode: Mode) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(self.input_tensor(&[volume])?);
        let trace = self.forward(&mut tape, &vars, x, mode)?;
        Ok(tape.value(trace.embedding).data().to_vec())
    }

    pub fn predict_age(&self, volume: &Volume) -> Result<f64> {
        Ok(self.infer(&[volume], 1)?.1[0])
    }

    /// Prediction, target-layer activation `A` and `∂ŷ/∂A` in eval mode at f64.
    pub fn forward_with_activations(&self, volume: &Volume, layer: &str) -> Result<ActivationGrad> {
        let index = self.config.layer_index(layer)?;
        let mut tape = Tape::<f64>::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(self.input_tensor(&[volume])?);
        let trace = self.forward(&mut tape, &vars, x, Mode::Eval)?;
        let a = tape.value(trace.layer(index).expect("layer recorded")).clone();
        let mut tail = Tape::<f64>::new();
        let vars = self.bind(&mut tail, |_| false);
        let leaf = tail.param(a.clone());
        let trace = self.forward_from(&mut tail, &vars, leaf, index + 1, Mode::Eval)?;
        let prediction = tail.value(trace.prediction).data()[0];
        let grads = tail.backward(trace.prediction, &Tensor::full(&[1], 1.0))?;
        let gradient = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
        Ok(ActivationGrad {
            prediction,
            activation: a,
            gradient,
        })
    }
}

/// Output of [`Model::forward_with_activations`].
#[derive(Clone, Debug)]
pub struct ActivationGrad {
    pub prediction: f64,
    /// `[1, C, D, H, W]`.
    pub activation: Tensor<f64>,
    pub gradient: Tensor<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dims: [16, 16, 16],
            ..EncoderConfig::default()
        }
    }

    fn noise_volume(dims: [usize; 3], seed: u64) -> Volume {
        use rand::Rng;
        let mut rng = rng_for(seed, &[]);
        let n = dims.iter().product();
        Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig {
            widths: vec![16, 8, 32],
            ..small()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            embedding_dim: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(matches!(small().layer_index("stage9"), Err(Error::UnknownLayer(_))));
        assert_eq!(EncoderConfig::default().layer_dims()[3], [4, 4, 4]);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = Model::new(EncoderConfig {
            normalize_embedding: true,
            ..small()
        })
        .unwrap();
        let v = noise_volume([16, 16, 16], 1);
        let a = m.embed(&v, Mode::Eval).unwrap();
        let b = m.embed(&v, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(m.embed(&noise_volume([8, 16, 16], 1), Mode::Eval).is_err());
        assert!(m.embed(&v, Mode::Train).is_err());
    }

    #[test]
    fn constant_and_affine_head() {
        let mut m = Model::new(small()).unwrap();
        let v = noise_volume([16, 16, 16], 2);
        m.set_head(&RegressionHead {
            weight: vec![0.0; 64],
            bias: 50.0,
        })
        .unwrap();
        assert_eq!(m.predict_age(&v).unwrap(), 50.0);
        let w: Vec<f64> = (0..64).map(|i| (i as f64 - 30.0) / 8.0).collect();
        m.set_head(&RegressionHead { weight: w.clone(), bias: 3.0 }).unwrap();
        let y1 = m.predict_age(&v).unwrap();
        m.set_head(&RegressionHead {
            weight: w.iter().map(|x| 2.0 * x).collect(),
            bias: 6.0,
        })
        .unwrap();
        let y2 = m.predict_age(&v).unwrap();
        assert!((y2 - 2.0 * y1).abs() < 1e-4 * y1.abs().max(1.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = Model::new(small()).unwrap();
        let vols = [noise_volume([16, 16, 16], 3), noise_volume([16, 16, 16], 4)];
        let refs: Vec<&Volume> = vols.iter().collect();
        let mut tape = Tape::<f32>::new();
        let vars = m.bind(&mut tape, |_| true);
        let x = tape.constant(m.input_tensor(&refs).unwrap());
        let trace = m.forward(&mut tape, &vars, x, Mode::Train).unwrap();
        let (prefix, node) = &trace.batch_norms[0];
        let batch_mean = tape.batch_stats(*node).unwrap().mean[0];
        m.update_running_stats(&tape, &trace);
        let got = m.buffers.get(&format!("{prefix}.mean")).unwrap().data()[0] as f64;
        assert!((got - 0.1 * batch_mean).abs() < 1e-6);
    }

    #[test]
    fn gradient_shape_matches_activation() {
        let m = Model::new(small()).unwrap();
        let v = noise_volume([16, 16, 16], 5);
        for layer in small().layer_names() {
            let ag = m.forward_with_activations(&v, &layer).unwrap();
            assert_eq!(ag.activation.shape(), ag.gradient.shape());
        }
    }
}
