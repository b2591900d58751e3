//! Monte Carlo dropout: repeated stochastic passes, their mean and
//! variance, vote tallies and review flags.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{argmax, ClassifierParams, DropoutMasks, NnError};
use crate::seed;

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Bins of the prediction histograms over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid Monte Carlo run: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Softmax outputs of every pass, indexed `(pass, specimen, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub predictions: Array3<f64>,
    pub seed: u64,
}

impl McRun {
    pub fn new(predictions: Array3<f64>, seed: u64) -> Result<Self, UncertaintyError> {
        let run = Self { predictions, seed };
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let (n, _, k) = self.predictions.dim();
        if n == 0 || k == 0 {
            return Err(UncertaintyError::Invalid("no passes or no classes".into()));
        }
        for pass in self.predictions.outer_iter() {
            for row in pass.outer_iter() {
                let sum: f64 = row.sum();
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(UncertaintyError::Invalid(format!("row {row} is not a distribution")));
                }
            }
        }
        Ok(())
    }

    pub fn n_passes(&self) -> usize {
        self.predictions.len_of(Axis(0))
    }

    pub fn batch(&self) -> usize {
        self.predictions.len_of(Axis(1))
    }

    pub fn num_classes(&self) -> usize {
        self.predictions.len_of(Axis(2))
    }
}

/// Runs `n_passes` train-mode forward passes. Pass `i` draws its dropout
/// masks from the `mc` stream of `seed` at index `i`, so passes can run in any
/// order and each one is reproducible alone.
pub fn mc_predict(
    params: &ClassifierParams,
    features: &Array2<f64>,
    n_passes: usize,
    seed: u64,
) -> Result<McRun, UncertaintyError> {
    if n_passes == 0 {
        return Err(UncertaintyError::Invalid("n_passes must be at least 1".into()));
    }
    params.validate()?;
    if params.dropout_rate == 0.0 {
        log::warn!("dropout rate is 0: all {n_passes} Monte Carlo passes will be identical");
    }
    // Dropout only acts after the first dense layer, so its product is shared.
    let z0 = params.first_preactivation(features.view())?;
    let batch = features.nrows();
    let passes = (0..n_passes)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed, "mc", &[i as u64]);
            let masks = (params.dropout_rate > 0.0).then(|| DropoutMasks::sample(params, batch, &mut rng));
            params.forward_from_first(&z0, masks.as_ref())
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    let k = params.num_classes();
    let mut predictions = Array3::zeros((n_passes, batch, k));
    for (mut slot, p) in predictions.outer_iter_mut().zip(&passes) {
        slot.assign(p);
    }
    McRun::new(predictions, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Ok,
    Uncertain,
    ConfidentWrong,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Uncertain => "uncertain",
            Self::ConfidentWrong => "confident_wrong",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlagThresholds {
    /// Minimum top mean probability for a confident prediction.
    pub confidence: f64,
    /// Minimum gap between the two largest mean probabilities.
    pub margin: f64,
}

impl Default for FlagThresholds {
    fn default() -> Self {
        Self {
            confidence: 0.7,
            margin: 0.2,
        }
    }
}

/// Per-specimen statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub n_passes: usize,
    pub mean: Array2<f64>,
    /// Population variance over the passes (divisor `N`).
    pub variance: Array2<f64>,
    pub votes: Array2<u32>,
    /// Argmax of the mean, lower index on ties.
    pub predicted_class: Vec<usize>,
    /// Label-free flags under the default thresholds until
    /// [`McSummary::apply_flags`] replaces them.
    pub flags: Vec<Flag>,
}

/// Mean, variance (Welford, divisor `N`) and per-pass argmax tallies,
/// accumulated in pass order.
pub fn summarize(run: &McRun) -> McSummary {
    let (n, batch, k) = run.predictions.dim();
    let mut mean = Array2::<f64>::zeros((batch, k));
    let mut m2 = Array2::<f64>::zeros((batch, k));
    let mut votes = Array2::<u32>::zeros((batch, k));
    for (i, pass) in run.predictions.outer_iter().enumerate() {
        let count = (i + 1) as f64;
        for s in 0..batch {
            let row = pass.row(s);
            votes[[s, argmax(row)]] += 1;
            for c in 0..k {
                let x = row[c];
                let delta = x - mean[[s, c]];
                mean[[s, c]] += delta / count;
                m2[[s, c]] += delta * (x - mean[[s, c]]);
            }
        }
    }
    let variance = m2.mapv(|v| (v / n as f64).max(0.0));
    let predicted_class: Vec<usize> = mean.outer_iter().map(argmax).collect();
    let mut summary = McSummary {
        n_passes: n,
        mean,
        variance,
        votes,
        predicted_class,
        flags: Vec::new(),
    };
    summary.flags = flag_difficult(&summary, None, &FlagThresholds::default());
    summary
}

impl McSummary {
    pub fn batch(&self) -> usize {
        self.mean.nrows()
    }

    /// Recomputes the flags with labels and thresholds.
    pub fn apply_flags(&mut self, labels: Option<&[usize]>, thresholds: &FlagThresholds) {
        self.flags = flag_difficult(self, labels, thresholds);
    }

    /// Ranking score per specimen: the largest per-class variance.
    pub fn uncertainty(&self) -> Vec<f64> {
        self.variance
            .outer_iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Most votes wins; ties go to the higher mean, then the lower class index.
pub fn majority_vote(summary: &McSummary) -> Vec<usize> {
    summary
        .votes
        .outer_iter()
        .zip(summary.mean.outer_iter())
        .map(|(v, m)| {
            let mut best = 0;
            for c in 1..v.len() {
                if v[c] > v[best] || (v[c] == v[best] && m[c] > m[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Uncertain when the top mean is below the confidence threshold or the top
/// two means are closer than the margin. Otherwise a wrong prediction is
/// confident-wrong. Without labels nothing is confident-wrong.
pub fn flag_difficult(summary: &McSummary, labels: Option<&[usize]>, t: &FlagThresholds) -> Vec<Flag> {
    summary
        .mean
        .outer_iter()
        .enumerate()
        .map(|(s, m)| {
            let mut sorted: Vec<f64> = m.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top = sorted[0];
            let second = sorted.get(1).copied().unwrap_or(0.0);
            if top < t.confidence || top - second < t.margin {
                Flag::Uncertain
            } else if labels.is_some_and(|l| l[s] != summary.predicted_class[s]) {
                Flag::ConfidentWrong
            } else {
                Flag::Ok
            }
        })
        .collect()
}

fn fraction_correct(pred: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let hits = pred.zip(labels).filter(|(p, l)| p == *l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy of the majority vote.
pub fn vote_accuracy(summary: &McSummary, labels: &[usize]) -> f64 {
    fraction_correct(majority_vote(summary).into_iter(), labels)
}

/// Accuracy of each single pass, in pass order.
pub fn pass_accuracies(run: &McRun, labels: &[usize]) -> Vec<f64> {
    run.predictions
        .outer_iter()
        .map(|pass| fraction_correct(pass.outer_iter().map(argmax), labels))
        .collect()
}

/// One line of the analysis report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub id: String,
    pub true_label: Option<String>,
    pub predicted_class: String,
    pub majority_vote: String,
    pub votes: Vec<u32>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub uncertainty: f64,
    pub flag: Flag,
}

pub fn report_rows(
    summary: &McSummary,
    ids: &[String],
    labels: Option<&[usize]>,
    class_names: &[String],
) -> Vec<ReportRow> {
    let votes = majority_vote(summary);
    let scores = summary.uncertainty();
    (0..summary.batch())
        .map(|s| ReportRow {
            id: ids[s].clone(),
            true_label: labels.map(|l| class_names[l[s]].clone()),
            predicted_class: class_names[summary.predicted_class[s]].clone(),
            majority_vote: class_names[votes[s]].clone(),
            votes: summary.votes.row(s).to_vec(),
            mean: summary.mean.row(s).to_vec(),
            variance: summary.variance.row(s).to_vec(),
            uncertainty: scores[s],
            flag: summary.flags[s],
        })
        .collect()
}

/// Flat CSV with one column per class for votes, mean and variance.
pub fn report_csv(rows: &[ReportRow], class_names: &[String]) -> Result<String, UncertaintyError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "id".to_string(),
        "true_label".into(),
        "predicted_class".into(),
        "majority_vote".into(),
    ];
    for prefix in ["votes", "mean", "variance"] {
        header.extend(class_names.iter().map(|c| format!("{prefix}_{c}")));
    }
    header.extend(["uncertainty".into(), "flag".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.id.clone(),
            r.true_label.clone().unwrap_or_default(),
            r.predicted_class.clone(),
            r.majority_vote.clone(),
        ];
        rec.extend(r.votes.iter().map(u32::to_string));
        rec.extend(r.mean.iter().map(f64::to_string));
        rec.extend(r.variance.iter().map(f64::to_string));
        rec.push(r.uncertainty.to_string());
        rec.push(r.flag.name().into());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| UncertaintyError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn report_json(rows: &[ReportRow]) -> Result<String, UncertaintyError> {
    Ok(serde_json::to_string_pretty(rows)? + "\n")
}

/// Histogram bin of a probability.
pub fn bin_of(p: f64) -> usize {
    ((p * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Per-pass probability histograms, class by class: one group over every
/// specimen and one group per flagged specimen.
pub fn histogram_csv(
    run: &McRun,
    summary: &McSummary,
    ids: &[String],
    class_names: &[String],
) -> Result<String, UncertaintyError> {
    let k = run.num_classes();
    let tally = |specimens: &[usize]| {
        let mut h = vec![[0u64; HISTOGRAM_BINS]; k];
        for pass in run.predictions.outer_iter() {
            for &s in specimens {
                for c in 0..k {
                    h[c][bin_of(pass[[s, c]])] += 1;
                }
            }
        }
        h
    };
    let mut groups: Vec<(String, String, Vec<usize>)> = vec![("all".into(), String::new(), (0..run.batch()).collect())];
    for (s, f) in summary.flags.iter().enumerate() {
        if *f != Flag::Ok {
            groups.push((ids[s].clone(), f.name().into(), vec![s]));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group".to_string(), "flag".into(), "class".into()];
    header.extend((0..HISTOGRAM_BINS).map(|b| {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        format!("{:.2}-{:.2}", b as f64 * w, (b + 1) as f64 * w)
    }));
    w.write_record(&header)?;
    for (name, flag, specimens) in &groups {
        for (c, counts) in tally(specimens).iter().enumerate() {
            let mut rec = vec![name.clone(), flag.clone(), class_names[c].clone()];
            rec.extend(counts.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| UncertaintyError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
