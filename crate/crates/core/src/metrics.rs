//! Classification metrics, concordance correlation and multi-seed
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts and ratios for the competent (1) class.
///
/// Ratios with a zero denominator are reported as 0 and listed in
/// `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Concordance between predicted and gold hard labels.
    pub ccc: f64,
    /// Concordance between the positive-class probability and gold labels.
    pub ccc_probability: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub n: usize,
    pub undefined: Vec<String>,
    pub seed: Option<u64>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and accuracy of 0/1 predictions. `ccc` is left at 0;
/// see [`evaluate`] for the full report.
pub fn classification_metrics(preds: &[u8], gold: &[u8]) -> Result<MetricsReport> {
    if preds.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gold.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Data("metrics need at least one prediction".into()));
    }
    if let Some(v) = preds.iter().chain(gold).find(|&&v| v > 1) {
        return Err(Error::Data(format!("label {v} is not 0 or 1")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(gold) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let mut undefined = Vec::new();
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / preds.len() as f64,
        ccc: 0.0,
        ccc_probability: None,
        tp,
        fp,
        fn_,
        tn,
        n: preds.len(),
        undefined,
        seed: None,
    })
}

/// Lin's concordance correlation coefficient with population moments.
///
/// Two constant sequences give 1 when equal and 0 otherwise; a single
/// constant sequence gives 0.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Data("concordance needs at least two values".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    match (constant(x), constant(y)) {
        (true, true) => return Ok(if x[0] == y[0] { 1.0 } else { 0.0 }),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    Ok(2.0 * cov / (vx + vy + (mx - my) * (mx - my)))
}

/// Full report from class probabilities and gold labels. A single
/// interview has no concordance, so both CCC values are 0 there.
pub fn evaluate(probs: &[[f64; 2]], gold: &[u8]) -> Result<MetricsReport> {
    let preds: Vec<u8> = probs.iter().map(|p| u8::from(p[1] > p[0])).collect();
    let mut report = classification_metrics(&preds, gold)?;
    if gold.len() >= 2 {
        let g: Vec<f64> = gold.iter().map(|&v| v as f64).collect();
        let hard: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
        let soft: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        report.ccc = ccc(&hard, &g)?;
        report.ccc_probability = Some(ccc(&soft, &g)?);
    }
    Ok(report)
}

/// One value per reported metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub ccc: f64,
    pub ccc_probability: f64,
}

impl MetricSummary {
    fn of(r: &MetricsReport) -> Self {
        Self {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            accuracy: r.accuracy,
            ccc: r.ccc,
            ccc_probability: r.ccc_probability.unwrap_or(0.0),
        }
    }

    fn values(&self) -> [f64; 6] {
        [self.precision, self.recall, self.f1, self.accuracy, self.ccc, self.ccc_probability]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            precision: v[0],
            recall: v[1],
            f1: v[2],
            accuracy: v[3],
            ccc: v[4],
            ccc_probability: v[5],
        }
    }
}

/// Result of one seed: a report, or the reason the run aborted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Per-seed outcomes with mean and sample standard deviation over the
/// seeds that completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateReport {
    pub runs: Vec<SeedOutcome>,
    pub completed: usize,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl AggregateReport {
    pub fn from_runs(runs: Vec<SeedOutcome>) -> Self {
        let rows: Vec<[f64; 6]> = runs
            .iter()
            .filter_map(|r| r.report.as_ref())
            .map(|r| MetricSummary::of(r).values())
            .collect();
        let n = rows.len();
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        if n > 0 {
            for k in 0..6 {
                mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
                if n > 1 {
                    let ss: f64 = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum();
                    std[k] = (ss / (n - 1) as f64).sqrt();
                }
            }
        }
        Self {
            runs,
            completed: n,
            mean: MetricSummary::from_values(mean),
            std: MetricSummary::from_values(std),
        }
    }

    pub fn is_partial(&self) -> bool {
        self.completed < self.runs.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per seed, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = [
            "seed", "precision", "recall", "f1", "accuracy", "ccc", "ccc_probability", "tp", "fp", "fn", "tn", "n",
            "error",
        ];
        w.write_record(header).expect("in-memory write");
        for run in &self.runs {
            let mut row = vec![run.seed.to_string()];
            match &run.report {
                Some(r) => {
                    row.extend(MetricSummary::of(r).values().iter().map(|v| v.to_string()));
                    row.extend([r.tp, r.fp, r.fn_, r.tn, r.n].iter().map(|v| v.to_string()));
                    row.push(String::new());
                }
                None => {
                    row.extend(std::iter::repeat(String::new()).take(11));
                    row.push(run.error.clone().unwrap_or_default());
                }
            }
            w.write_record(&row).expect("in-memory write");
        }
        for (name, s) in [("mean", &self.mean), ("std", &self.std)] {
            let mut row = vec![name.to_string()];
            row.extend(s.values().iter().map(|v| v.to_string()));
            row.extend(std::iter::repeat(String::new()).take(6));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
