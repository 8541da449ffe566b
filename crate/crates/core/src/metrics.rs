//! Dimensional and categorical scores, and skew-normalized evaluation.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_SKEW_TRIALS: usize = 200;

fn check_pair(op: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::contract(
            op,
            format!("{} predictions vs {} ground-truth values", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::contract(op, "empty series"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population mean, variance and the covariance of the pair.
fn moments(pred: &[f64], gt: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mp, mg) = (mean(pred), mean(gt));
    let n = pred.len() as f64;
    let (mut vp, mut vg, mut cov) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
        cov += (p - mp) * (g - mg);
    }
    (mp, mg, vp / n, vg / n, cov / n)
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("rmse", pred, gt)?;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Pearson correlation.
pub fn cc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("cc", pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::undefined("cc", "needs at least two samples"));
    }
    let (_, _, vp, vg, cov) = moments(pred, gt);
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::undefined("cc", "a series has zero variance"));
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// Concordance correlation coefficient.
pub fn ccc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("ccc", pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::undefined("ccc", "needs at least two samples"));
    }
    let (mp, mg, vp, vg, cov) = moments(pred, gt);
    let denom = vp + vg + (mp - mg) * (mp - mg);
    if vp == 0.0 && vg == 0.0 {
        return Err(Error::undefined("ccc", "both series have zero variance"));
    }
    Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of samples whose signs agree, with `sign(0) = 0`.
pub fn sagr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("sagr", pred, gt)?;
    let agree = pred.iter().zip(gt).filter(|(&p, &g)| sign(p) == sign(g)).count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion_matrix", "rows must form a non-empty square"));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(pred: &[usize], gt: &[usize], classes: usize) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::contract(
                "confusion_matrix",
                format!("{} predictions vs {} labels", pred.len(), gt.len()),
            ));
        }
        let mut cm = Self::zeros(classes);
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= classes || g >= classes {
                return Err(Error::contract(
                    "confusion_matrix",
                    format!("label pair ({g}, {p}) outside [0, {classes})"),
                ));
            }
            cm.counts[g * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn actual(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, class)).sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalScores {
    pub accuracy: f64,
    pub f1: f64,
    pub ppv: f64,
    pub kappa: Result<f64, UndefinedReason>,
    pub alpha: Result<f64, UndefinedReason>,
    pub mcc: Result<f64, UndefinedReason>,
}

/// Why a score could not be computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndefinedReason {
    /// Chance agreement is already perfect.
    DegenerateChance,
    /// Fewer than two categories occur.
    SingleCategory,
    /// One rater uses a single category.
    ZeroVariance,
}

impl UndefinedReason {
    fn into_error(self, metric: &'static str) -> Error {
        let reason = match self {
            UndefinedReason::DegenerateChance => "expected agreement is 1",
            UndefinedReason::SingleCategory => "fewer than two categories occur",
            UndefinedReason::ZeroVariance => "predictions or labels use a single class",
        };
        Error::undefined(metric, reason)
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::contract("accuracy", "confusion matrix is empty"));
    }
    Ok(cm.diagonal() as f64 / n as f64)
}

/// Classes that occur as a label or a prediction; the rest are dropped from
/// macro averages.
fn active_classes(cm: &ConfusionMatrix) -> Vec<usize> {
    let active: Vec<usize> = (0..cm.classes())
        .filter(|&c| cm.actual(c) + cm.predicted(c) > 0)
        .collect();
    if active.len() < cm.classes() {
        warn!(
            "{} of {} classes never occur and are left out of macro averages",
            cm.classes() - active.len(),
            cm.classes()
        );
    }
    active
}

/// Macro precision and F1. A class that occurs but is never predicted has
/// precision 0.
fn macro_ppv_f1(cm: &ConfusionMatrix) -> (f64, f64) {
    let active = active_classes(cm);
    let (mut ppv, mut f1) = (0.0, 0.0);
    for &c in &active {
        let tp = cm.get(c, c) as f64;
        let predicted = cm.predicted(c) as f64;
        let actual = cm.actual(c) as f64;
        ppv += if predicted > 0.0 { tp / predicted } else { 0.0 };
        f1 += 2.0 * tp / (predicted + actual);
    }
    let k = active.len() as f64;
    (ppv / k, f1 / k)
}

fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, UndefinedReason> {
    let n = cm.total() as f64;
    let po = cm.diagonal() as f64 / n;
    let pe: f64 = (0..cm.classes())
        .map(|c| cm.actual(c) as f64 * cm.predicted(c) as f64)
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return Err(UndefinedReason::DegenerateChance);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Nominal Krippendorff's alpha with prediction and ground truth as two
/// raters of every sample.
fn krippendorff_alpha(cm: &ConfusionMatrix) -> Result<f64, UndefinedReason> {
    let k = cm.classes();
    // coincidence matrix o[c][k] = cm[c][k] + cm[k][c], total 2N
    let o = |c: usize, d: usize| (cm.get(c, d) + cm.get(d, c)) as f64;
    let n_c: Vec<f64> = (0..k).map(|c| (0..k).map(|d| o(c, d)).sum()).collect();
    let n: f64 = n_c.iter().sum();
    let observed: f64 = (0..k)
        .flat_map(|c| (0..k).filter(move |&d| d != c).map(move |d| (c, d)))
        .map(|(c, d)| o(c, d))
        .sum();
    let total_sq: f64 = n_c.iter().sum::<f64>().powi(2);
    let expected = total_sq - n_c.iter().map(|x| x * x).sum::<f64>();
    if expected == 0.0 {
        return Err(UndefinedReason::SingleCategory);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Multi-class Matthews correlation from the confusion matrix.
fn matthews(cm: &ConfusionMatrix) -> Result<f64, UndefinedReason> {
    let s = cm.total() as f64;
    let c = cm.diagonal() as f64;
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for k in 0..cm.classes() {
        let p = cm.predicted(k) as f64;
        let t = cm.actual(k) as f64;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Err(UndefinedReason::ZeroVariance);
    }
    Ok(((c * s - pt) / denom).clamp(-1.0, 1.0))
}

pub fn categorical_metrics(cm: &ConfusionMatrix) -> Result<CategoricalScores> {
    let accuracy = accuracy(cm)?;
    let (ppv, f1) = macro_ppv_f1(cm);
    Ok(CategoricalScores {
        accuracy,
        f1,
        ppv,
        kappa: cohen_kappa(cm),
        alpha: krippendorff_alpha(cm),
        mcc: matthews(cm),
    })
}

/// Names of the categorical scores, in report order.
pub const CATEGORICAL_METRICS: [&str; 6] = ["accuracy", "f1", "ppv", "kappa", "alpha", "mcc"];

/// Scores a prediction/label series with the named categorical metric.
pub fn categorical_score(name: &str, pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let cm = ConfusionMatrix::from_labels(pred, gt, classes)?;
    let s = categorical_metrics(&cm)?;
    match name {
        "accuracy" => Ok(s.accuracy),
        "f1" => Ok(s.f1),
        "ppv" => Ok(s.ppv),
        "kappa" => s.kappa.map_err(|r| r.into_error("kappa")),
        "alpha" => s.alpha.map_err(|r| r.into_error("alpha")),
        "mcc" => s.mcc.map_err(|r| r.into_error("mcc")),
        other => Err(Error::Config(format!("unknown categorical metric {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewNormalized {
    pub original: f64,
    pub normalized: f64,
    pub per_trial: Vec<f64>,
}

/// Index sets that under-sample every class of `gt` to the rarest class
/// count, one per trial. Trial `t` draws from its own stream of `seed`.
pub fn balanced_subsets(gt: &[usize], classes: usize, trials: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if trials == 0 {
        return Err(Error::contract("skew_normalize", "trials must be at least 1"));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &g) in gt.iter().enumerate() {
        if g >= classes {
            return Err(Error::contract("skew_normalize", format!("label {g} outside [0, {classes})")));
        }
        by_class[g].push(i);
    }
    let min = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if min == 0 {
        let missing = by_class.iter().position(Vec::is_empty).unwrap_or(0);
        return Err(Error::contract(
            "skew_normalize",
            format!("class {missing} has no test samples"),
        ));
    }
    Ok((0..trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut picked: Vec<usize> = by_class
                .iter()
                .flat_map(|members| {
                    sample(&mut rng, members.len(), min)
                        .into_iter()
                        .map(|j| members[j])
                        .collect::<Vec<_>>()
                })
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect())
}

/// Scores the full set and the mean over `trials` class-balanced subsets.
pub fn skew_normalize<F>(
    scorer: F,
    pred: &[usize],
    gt: &[usize],
    classes: usize,
    trials: usize,
    seed: u64,
) -> Result<SkewNormalized>
where
    F: Fn(&[usize], &[usize]) -> Result<f64>,
{
    if pred.len() != gt.len() {
        return Err(Error::contract(
            "skew_normalize",
            format!("{} predictions vs {} labels", pred.len(), gt.len()),
        ));
    }
    let subsets = balanced_subsets(gt, classes, trials, seed)?;
    let original = scorer(pred, gt)?;
    let per_trial = subsets
        .iter()
        .map(|idx| {
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let g: Vec<usize> = idx.iter().map(|&i| gt[i]).collect();
            scorer(&p, &g)
        })
        .collect::<Result<Vec<f64>>>()?;
    let normalized = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    Ok(SkewNormalized {
        original,
        normalized,
        per_trial,
    })
}

/// A reported value, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined(String),
}

impl MetricValue {
    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(MetricValue::Value(v)),
            Err(Error::UndefinedMetric { reason, .. }) => Ok(MetricValue::Undefined(reason)),
            Err(e) => Err(e),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub name: String,
    pub original: MetricValue,
    pub normalized: Option<MetricValue>,
}

/// Named scores with optional skew-normalized companions. Serializes as a
/// flat JSON object: `name`, `name_norm`, then `trials` and `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    pub trials: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Undefined(_) => s.serialize_str("undefined"),
        }
    }
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(None)?;
        for e in &self.entries {
            map.serialize_entry(&e.name, &e.original)?;
            if let Some(norm) = &e.normalized {
                map.serialize_entry(&format!("{}_norm", e.name), norm)?;
            }
        }
        map.serialize_entry("trials", &self.trials)?;
        map.serialize_entry("seed", &self.seed)?;
        map.end()
    }
}

/// Categorical report; normalized companions are added when `trials > 0`.
pub fn categorical_report(
    pred: &[usize],
    gt: &[usize],
    classes: usize,
    trials: usize,
    seed: u64,
) -> Result<MetricReport> {
    let cm = ConfusionMatrix::from_labels(pred, gt, classes)?;
    if cm.total() == 0 {
        return Err(Error::contract("metrics", "no samples to score"));
    }
    let subsets = if trials > 0 {
        Some(balanced_subsets(gt, classes, trials, seed)?)
    } else {
        None
    };
    let mut entries = Vec::with_capacity(CATEGORICAL_METRICS.len());
    for name in CATEGORICAL_METRICS {
        let original = MetricValue::from_result(categorical_score(name, pred, gt, classes))?;
        let normalized = match &subsets {
            Some(subsets) => {
                let mut sum = 0.0;
                let mut undefined = None;
                for idx in subsets {
                    let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                    let g: Vec<usize> = idx.iter().map(|&i| gt[i]).collect();
                    match categorical_score(name, &p, &g, classes) {
                        Ok(v) => sum += v,
                        Err(Error::UndefinedMetric { reason, .. }) => {
                            undefined = Some(reason);
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Some(match undefined {
                    Some(reason) => MetricValue::Undefined(reason),
                    None => MetricValue::Value(sum / subsets.len() as f64),
                })
            }
            None => None,
        };
        entries.push(MetricEntry {
            name: name.to_string(),
            original,
            normalized,
        });
    }
    Ok(MetricReport {
        entries,
        trials,
        seed,
    })
}

/// Valence/arousal report with RMSE, CC, CCC and SAGR per axis.
pub fn dimensional_report(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<MetricReport> {
    let axis = |s: &[[f64; 2]], a: usize| -> Vec<f64> { s.iter().map(|v| v[a]).collect() };
    type Scorer = fn(&[f64], &[f64]) -> Result<f64>;
    let scorers: [(&str, Scorer); 4] = [("rmse", rmse), ("cc", cc), ("ccc", ccc), ("sagr", sagr)];
    let mut entries = Vec::with_capacity(8);
    for (name, f) in scorers {
        for (a, axis_name) in ["valence", "arousal"].into_iter().enumerate() {
            entries.push(MetricEntry {
                name: format!("{name}_{axis_name}"),
                original: MetricValue::from_result(f(&axis(pred, a), &axis(gt, a)))?,
                normalized: None,
            });
        }
    }
    Ok(MetricReport {
        entries,
        trials: 0,
        seed: 0,
    })
}
