//! Regression metrics, t-tests, correlations and the evaluation report.
//!
//! p-values come from the regularized incomplete beta function, evaluated by
//! continued fraction. Standard deviations use n − 1 throughout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{atomic_write, write_json};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// I_x(a, b) given both `x` and `1 − x` (passing the complement avoids
/// cancellation when x is close to 1).
fn beta_reg_pair(a: f64, b: f64, x: f64, one_minus_x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * one_minus_x.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, one_minus_x) / b
    }
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    beta_reg_pair(a, b, x, 1.0 - x)
}

/// Two-sided p-value of a Student-t statistic. Exactly 1 at t = 0.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let p = beta_reg_pair(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2));
    p.clamp(0.0, 1.0)
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_sided_p(t, df);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64], m: f64) -> f64 {
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn check_pair(what: &'static str, a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(what, format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::invalid(what, format!("n = {}, need at least {min}", a.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid(what, "non-finite input"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub n: usize,
    pub mae: f64,
    /// Sample standard deviation of the absolute errors (0 when n = 1).
    pub mae_std: f64,
    pub r2: f64,
}

pub fn mae_r2(predictions: &[f64], truths: &[f64]) -> Result<RegressionMetrics> {
    check_pair("mae_r2", predictions, truths, 1)?;
    let abs: Vec<f64> = predictions.iter().zip(truths).map(|(p, t)| (p - t).abs()).collect();
    let mae = mean(&abs);
    let mae_std = if abs.len() > 1 { sample_std(&abs, mae) } else { 0.0 };
    let ybar = mean(truths);
    let ss_tot: f64 = truths.iter().map(|t| (t - ybar) * (t - ybar)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance { what: "truths (R² undefined)" });
    }
    let ss_res: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(RegressionMetrics {
        n: abs.len(),
        mae,
        mae_std,
        r2: 1.0 - ss_res / ss_tot,
    })
}

mod signed_float {
    //! Finite values as numbers, infinities as the strings "inf" and "-inf".
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("bad float {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "signed_float")]
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean: f64,
    pub std: f64,
    /// Zero variance with a nonzero mean: t is infinite and p is 0.
    pub degenerate: bool,
}

fn t_from(m: f64, sd: f64, n: usize) -> TTest {
    let df = n - 1;
    if sd == 0.0 {
        let degenerate = m != 0.0;
        let t = if degenerate { f64::INFINITY.copysign(m) } else { 0.0 };
        return TTest {
            t,
            df,
            p: if degenerate { 0.0 } else { 1.0 },
            mean: m,
            std: sd,
            degenerate,
        };
    }
    let t = m / (sd / (n as f64).sqrt());
    TTest {
        t,
        df,
        p: t_two_sided_p(t, df as f64),
        mean: m,
        std: sd,
        degenerate: false,
    }
}

/// Two-sided one-sample t-test of `values` against `mu0`.
pub fn one_sample_ttest(values: &[f64], mu0: f64) -> Result<TTest> {
    if values.len() < 2 {
        return Err(Error::invalid("t-test", format!("n = {}, need at least 2", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) || !mu0.is_finite() {
        return Err(Error::invalid("t-test", "non-finite input"));
    }
    let shifted: Vec<f64> = values.iter().map(|v| v - mu0).collect();
    let m = mean(&shifted);
    Ok(t_from(m, sample_std(&shifted, m), values.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagStats {
    pub bag: Vec<f64>,
    /// mean(ŷ) − mean(y).
    pub mean: f64,
    pub std: f64,
    pub test: TTest,
}

/// Brain age gap ŷ − y and its one-sample t-test against zero.
pub fn bag_stats(predictions: &[f64], truths: &[f64]) -> Result<BagStats> {
    check_pair("bag_stats", predictions, truths, 2)?;
    let bag: Vec<f64> = predictions.iter().zip(truths).map(|(p, t)| p - t).collect();
    let m = mean(predictions) - mean(truths);
    let sd = sample_std(&bag, m);
    Ok(BagStats {
        test: t_from(m, sd, bag.len()),
        bag,
        mean: m,
        std: sd,
    })
}

/// Paired t-test on |e_A| − |e_B|; negative t means A has smaller errors.
pub fn paired_abs_error_ttest(errors_a: &[f64], errors_b: &[f64]) -> Result<TTest> {
    check_pair("paired t-test", errors_a, errors_b, 2)?;
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a.abs() - b.abs()).collect();
    let m = mean(&d);
    Ok(t_from(m, sample_std(&d, m), d.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance { what: "correlation input" });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Coefficient and two-sided p via t = r·√((n−2)/(1−r²)).
pub fn correlate(x: &[f64], y: &[f64], kind: CorrelationKind) -> Result<(f64, f64)> {
    check_pair("correlate", x, y, 3)?;
    let r = match kind {
        CorrelationKind::Pearson => pearson(x, y)?,
        CorrelationKind::Spearman => pearson(&average_ranks(x), &average_ranks(y))?,
    };
    let n = x.len() as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        t_two_sided_p(r * ((n - 2.0) / (1.0 - r * r)).sqrt(), n - 2.0)
    };
    Ok((r, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub covariate: String,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

impl CorrelationEntry {
    pub fn compute(covariate: &str, x: &[f64], y: &[f64]) -> Result<Self> {
        let (pearson_r, pearson_p) = correlate(x, y, CorrelationKind::Pearson)?;
        let (spearman_rho, spearman_p) = correlate(x, y, CorrelationKind::Spearman)?;
        Ok(Self {
            covariate: covariate.to_string(),
            pearson_r,
            pearson_p,
            spearman_rho,
            spearman_p,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub age: f64,
    pub prediction: f64,
    pub bag: f64,
}

/// Metrics restricted to ages at or above `min_age`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub min_age: f64,
    pub metrics: RegressionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub metrics: RegressionMetrics,
    pub subgroup: Option<SubgroupMetrics>,
    pub bag_mean: f64,
    pub bag_std: f64,
    pub bag_test: TTest,
    pub correlations: Vec<CorrelationEntry>,
    pub samples: Vec<SampleRow>,
}

impl ModelEval {
    pub fn new(model: &str, ids: &[String], ages: &[f64], predictions: &[f64]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty {
                what: format!("evaluation set for {model}"),
            });
        }
        if ids.len() != ages.len() {
            return Err(Error::invalid("evaluation", "ids and ages differ in length"));
        }
        let metrics = mae_r2(predictions, ages)?;
        let bag = bag_stats(predictions, ages)?;
        let samples = ids
            .iter()
            .zip(ages.iter().zip(predictions))
            .zip(&bag.bag)
            .map(|((id, (&age, &prediction)), &b)| SampleRow {
                id: id.clone(),
                age,
                prediction,
                bag: b,
            })
            .collect();
        Ok(Self {
            model: model.to_string(),
            metrics,
            subgroup: None,
            bag_mean: bag.mean,
            bag_std: bag.std,
            bag_test: bag.test,
            correlations: Vec::new(),
            samples,
        })
    }

    /// Correlates the per-sample BAG with a covariate.
    pub fn add_covariate(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let bag: Vec<f64> = self.samples.iter().map(|s| s.bag).collect();
        self.correlations.push(CorrelationEntry::compute(name, &bag, values)?);
        Ok(())
    }

    pub fn abs_errors(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.bag.abs()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub model_a: String,
    pub model_b: String,
    /// On |e_A| − |e_B|.
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Configuration and seeds the numbers came from.
    pub provenance: serde_json::Value,
    pub models: Vec<ModelEval>,
    pub paired: Vec<PairedComparison>,
}

impl EvalReport {
    /// Builds a report; with two or more models every pair is compared
    /// (sample ids must then agree).
    pub fn new(provenance: serde_json::Value, models: Vec<ModelEval>) -> Result<Self> {
        let mut paired = Vec::new();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let (a, b) = (&models[i], &models[j]);
                if a.samples.iter().map(|s| &s.id).ne(b.samples.iter().map(|s| &s.id)) {
                    return Err(Error::invalid("paired comparison", format!("{} and {} cover different samples", a.model, b.model)));
                }
                paired.push(PairedComparison {
                    model_a: a.model.clone(),
                    model_b: b.model.clone(),
                    test: paired_abs_error_ttest(&a.abs_errors(), &b.abs_errors())?,
                });
            }
        }
        Ok(Self {
            provenance,
            models,
            paired,
        })
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("model,id,age,prediction,bag\n");
        for m in &self.models {
            for s in &m.samples {
                out.push_str(&format!("{},{},{},{},{}\n", m.model, s.id, s.age, s.prediction, s.bag));
            }
        }
        out
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const SAMPLES_CSV: &str = "samples.csv";

/// Writes `report.json` and `samples.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    if report.models.is_empty() || report.models.iter().any(|m| m.samples.is_empty()) {
        return Err(Error::Empty { what: "evaluation report".into() });
    }
    write_json(&dir.join(REPORT_JSON), report)?;
    atomic_write(&dir.join(SAMPLES_CSV), report.samples_csv().as_bytes())
}
