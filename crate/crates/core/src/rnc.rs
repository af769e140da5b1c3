//! Rank-N-Contrast loss and the L1 regression loss.
//!
//! For anchor `i` and partner `j`, the ranked set
//! `S(i, j) = {k ≠ i : |y_i − y_k| ≥ |y_i − y_j|}` (ties included) supplies the
//! denominator of a softmax over similarities scaled by `1/τ`. The batch loss
//! averages `−log p(j | i)` over all ordered pairs.

use serde::{Deserialize, Serialize};

use rankage_autodiff::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    NegativeL2,
    Cosine,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::NegativeL2 => "negative-l2",
            Similarity::Cosine => "cosine",
        }
    }

    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::NegativeL2 => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            Similarity::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dot / (na * nb)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Every batch member is a different subject.
    DistinctSamples,
    /// Each subject contributes two independently augmented views.
    TwoViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RncConfig {
    pub temperature: f64,
    pub similarity: Similarity,
    pub batch_mode: BatchMode,
}

impl Default for RncConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            similarity: Similarity::NegativeL2,
            batch_mode: BatchMode::DistinctSamples,
        }
    }
}

impl RncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("rnc config", format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// `M` embeddings of dimension `d` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::invalid("embedding batch", format!("M = {}, need at least 2", embeddings.len())));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::invalid(
                "embedding batch",
                format!("{} embeddings vs {} labels", embeddings.len(), labels.len()),
            ));
        }
        let d = embeddings[0].len();
        if d == 0 || embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::invalid("embedding batch", "embeddings need one common nonzero dimension"));
        }
        if embeddings.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding batch", "non-finite entry"));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn tensor(&self) -> Tensor<f64> {
        let flat = self.embeddings.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), self.dim()], flat).expect("validated shape")
    }
}

fn ranked_set_unchecked(labels: &[f64], i: usize, j: usize) -> Vec<usize> {
    let r = (labels[i] - labels[j]).abs();
    (0..labels.len())
        .filter(|&k| k != i && (labels[i] - labels[k]).abs() >= r)
        .collect()
}

/// Indices `k ≠ i` at least as label-distant from the anchor as `j`.
pub fn ranked_set(labels: &[f64], i: usize, j: usize) -> Result<Vec<usize>> {
    if i == j {
        return Err(Error::invalid("ranked set", format!("anchor and partner are both {i}")));
    }
    if i >= labels.len() || j >= labels.len() {
        return Err(Error::invalid("ranked set", format!("index out of range for {} labels", labels.len())));
    }
    Ok(ranked_set_unchecked(labels, i, j))
}

/// `(1/(M−1)) Σ_{j≠i} −log softmax` for one anchor, log-sum-exp stabilized.
pub fn rnc_per_sample_loss(batch: &EmbeddingBatch, i: usize, config: &RncConfig) -> Result<f64> {
    config.validate()?;
    let m = batch.len();
    if i >= m {
        return Err(Error::invalid("rnc anchor", format!("{i} out of range for M = {m}")));
    }
    let e = batch.embeddings();
    let s: Vec<f64> = (0..m)
        .map(|k| config.similarity.between(&e[i], &e[k]) / config.temperature)
        .collect();
    let mut total = 0.0;
    for j in (0..m).filter(|&j| j != i) {
        let set = ranked_set_unchecked(batch.labels(), i, j);
        let mx = set.iter().map(|&k| s[k]).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + set.iter().map(|&k| (s[k] - mx).exp()).sum::<f64>().ln();
        total += lse - s[j];
    }
    Ok(total / (m - 1) as f64)
}

/// Records the batch loss on `tape` for embeddings `x` of shape `[M, d]`.
pub fn rnc_loss_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, labels: &[f64], config: &RncConfig) -> Result<Var> {
    config.validate()?;
    let shape = tape.shape(x).to_vec();
    let m = labels.len();
    if shape.len() != 2 || shape[0] != m {
        return Err(Error::invalid("rnc loss", format!("embeddings {shape:?} vs {m} labels")));
    }
    if m < 2 {
        return Err(Error::invalid("rnc loss", format!("M = {m}, need at least 2")));
    }
    let sim = match config.similarity {
        Similarity::NegativeL2 => tape.pairwise_neg_l2(x)?,
        Similarity::Cosine => tape.pairwise_cosine(x)?,
    };
    let scaled = tape.scale(sim, 1.0 / config.temperature)?;
    let mut index = Vec::with_capacity(m * (m - 1));
    let mut subsets = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            index.push(i * m + j);
            subsets.push((i, ranked_set_unchecked(labels, i, j)));
        }
    }
    let numerators = tape.gather(scaled, index)?;
    let denominators = tape.subset_logsumexp(scaled, subsets)?;
    let nll = tape.sub(denominators, numerators)?;
    Ok(tape.mean(nll)?)
}

/// Mean per-anchor loss over all `M` anchors.
pub fn rnc_batch_loss(batch: &EmbeddingBatch, config: &RncConfig) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(batch.tensor());
    let loss = rnc_loss_on_tape(&mut tape, x, batch.labels(), config)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and `∂L/∂v_i` for every embedding, by reverse mode over the loss expression.
pub fn rnc_batch_gradient(batch: &EmbeddingBatch, config: &RncConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(batch.tensor());
    let loss = rnc_loss_on_tape(&mut tape, x, batch.labels(), config)?;
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    let g = grads.get(x).expect("embeddings are differentiable");
    let rows = g.data().chunks(batch.dim()).map(<[f64]>::to_vec).collect();
    Ok((tape.value(loss).data()[0], rows))
}

/// Mean absolute error and its gradient `sign(ŷ − y)/n` (0 at exact ties).
pub fn l1_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.is_empty() {
        return Err(Error::Empty { what: "l1 loss input".into() });
    }
    if predictions.len() != targets.len() {
        return Err(Error::invalid(
            "l1 loss",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    let n = predictions.len() as f64;
    let loss = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

/// `mean |pred − targets|` on the tape; `pred` has one entry per target.
pub fn l1_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Empty { what: "l1 loss input".into() });
    }
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != targets.len() {
        return Err(Error::invalid("l1 loss", format!("prediction {shape:?} vs {} targets", targets.len())));
    }
    let t = tape.constant(Tensor::new(shape, targets.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranked_set_examples() {
        let y = [20.0, 30.0, 50.0];
        assert_eq!(ranked_set(&y, 0, 1).unwrap(), vec![1, 2]);
        assert_eq!(ranked_set(&y, 0, 2).unwrap(), vec![2]);
        assert_eq!(ranked_set(&[5.0; 4], 2, 0).unwrap(), vec![0, 1, 3]);
        assert!(ranked_set(&y, 1, 1).is_err());
    }

    #[test]
    fn forced_values() {
        let cfg = RncConfig::default();
        let b = EmbeddingBatch::new(vec![vec![0.3, -1.0], vec![2.0, 0.5]], vec![20.0, 70.0]).unwrap();
        assert_eq!(rnc_batch_loss(&b, &cfg).unwrap(), 0.0);
        assert_eq!(rnc_per_sample_loss(&b, 1, &cfg).unwrap(), 0.0);
        let b = EmbeddingBatch::new(vec![vec![0.5, 0.5]; 4], vec![40.0; 4]).unwrap();
        assert!((rnc_batch_loss(&b, &cfg).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(EmbeddingBatch::new(vec![vec![1.0]], vec![1.0]).is_err());
    }

    #[test]
    fn per_sample_mean_equals_batch() {
        let e = vec![vec![0.0], vec![1.0], vec![3.0], vec![-0.5]];
        let b = EmbeddingBatch::new(e, vec![20.0, 30.0, 50.0, 33.0]).unwrap();
        let cfg = RncConfig::default();
        let mean = (0..4).map(|i| rnc_per_sample_loss(&b, i, &cfg).unwrap()).sum::<f64>() / 4.0;
        assert!((mean - rnc_batch_loss(&b, &cfg).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn l1_examples() {
        let (l, g) = l1_loss(&[21.0, 19.0], &[20.0, 20.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![0.5, -0.5]);
        let (l, g) = l1_loss(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        assert!(l1_loss(&[], &[]).is_err());
    }
}
