//! One generative model per class; classification by maximum predictive
//! log-density.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::pca::{PcaTarget, PcaTransform};
use crate::data::SequenceRecord;
use crate::emission::Frame;
use crate::error::{Error, Result};
use crate::lattice;
use crate::model::default_hyper;
use crate::trainer::{fit, TrainConfig, TrainedModel};

/// Which point surrogate of the posterior is plugged into the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictiveParams {
    /// Geometric means `exp(E[log θ])`, as used during training.
    #[default]
    Starred,
    /// Posterior means with plug-in Gaussians.
    Mean,
}

impl FromStr for PredictiveParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "starred" => Ok(PredictiveParams::Starred),
            "mean" => Ok(PredictiveParams::Mean),
            other => Err(Error::InvalidArgument(format!(
                "unknown predictive parameters `{other}` (expected starred or mean)"
            ))),
        }
    }
}

impl fmt::Display for PredictiveParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictiveParams::Starred => "starred",
            PredictiveParams::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreOptions {
    pub params: PredictiveParams,
    /// Divide each score by the sequence length. Off by default.
    pub per_frame: bool,
}

/// Log predictive density of a sequence under a trained model.
pub fn score(model: &TrainedModel, frames: &[Frame], params: PredictiveParams) -> Result<f64> {
    let (chain, emissions) = match params {
        PredictiveParams::Starred => (model.posteriors.starred(), model.emissions.prepare()?),
        PredictiveParams::Mean => (model.posteriors.mean_params(), model.emissions.prepare_mean()?),
    };
    let table = emissions.log_table(frames)?;
    Ok(lattice::loglik(&lattice::forward(&chain, &table)?))
}

/// Row-normalised posterior mean of the lag transition matrix.
pub fn dependence_matrix(model: &TrainedModel) -> Vec<Vec<f64>> {
    model.posteriors.dependence_matrix()
}

/// Highest-scoring label; ties go to the earliest entry and NaN never wins.
pub fn argmax_label(scores: &[(String, f64)]) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, s) in scores {
        let s = if s.is_nan() { f64::NEG_INFINITY } else { *s };
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((label, s)),
        }
    }
    best.map(|(l, _)| l)
}

/// Trained models keyed by class label, plus the shared preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBank {
    pub models: BTreeMap<String, TrainedModel>,
    pub preprocessing: Option<PcaTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: String,
    /// Per-class scores in label order.
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
    pub predicted: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub labels: Vec<String>,
    pub accuracy: f64,
    /// Rows are true labels, columns predicted labels, both in `labels` order.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
}

impl ModelBank {
    pub fn new(
        models: BTreeMap<String, TrainedModel>,
        preprocessing: Option<PcaTransform>,
    ) -> Result<Self> {
        let bank = ModelBank { models, preprocessing };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = self.models.values().map(|m| m.hyper.dim);
        let Some(dim) = dims.next() else {
            return Err(Error::InvalidArgument("model bank has no classes".into()));
        };
        if dims.any(|d| d != dim) {
            return Err(Error::Shape("bank models disagree on dimension".into()));
        }
        if let Some(p) = &self.preprocessing {
            if p.output_dim() != dim {
                return Err(Error::Shape("preprocessing output does not match models".into()));
            }
        }
        for m in self.models.values() {
            m.validate()?;
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    /// Dimension of raw input frames.
    pub fn input_dim(&self) -> usize {
        match &self.preprocessing {
            Some(p) => p.input_dim(),
            None => self.models.values().next().map_or(0, |m| m.hyper.dim),
        }
    }

    fn project(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        match &self.preprocessing {
            Some(p) => p.apply_frames(frames),
            None => Ok(frames.to_vec()),
        }
    }

    /// Scores raw (unprojected) frames against every class.
    pub fn classify(&self, frames: &[Frame], opts: &ScoreOptions) -> Result<Classification> {
        let projected = self.project(frames)?;
        let mut scores = Vec::with_capacity(self.models.len());
        for (label, model) in &self.models {
            let mut s = score(model, &projected, opts.params)?;
            if opts.per_frame {
                s /= frames.len() as f64;
            }
            scores.push((label.clone(), s));
        }
        let label = argmax_label(&scores).expect("bank is nonempty").to_string();
        Ok(Classification { label, scores })
    }

    /// Accuracy and confusion matrix on a labelled test set.
    pub fn evaluate(&self, records: &[SequenceRecord], opts: &ScoreOptions) -> Result<Evaluation> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("test set is empty".into()));
        }
        let labels = self.labels();
        let index: BTreeMap<&str, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut truth = Vec::with_capacity(records.len());
        for r in records {
            let l = r.label.as_deref().ok_or_else(|| {
                Error::InvalidArgument(format!("test sequence `{}` has no label", r.id))
            })?;
            let i = *index.get(l).ok_or_else(|| Error::UnknownLabel(l.to_string()))?;
            truth.push(i);
        }
        let results: Vec<Result<Classification>> =
            records.par_iter().map(|r| self.classify(&r.frames, opts)).collect();

        let k = labels.len();
        let mut confusion = vec![vec![0usize; k]; k];
        let mut predictions = Vec::with_capacity(records.len());
        for ((r, &t), c) in records.iter().zip(&truth).zip(results) {
            let c = c?;
            confusion[t][index[c.label.as_str()]] += 1;
            predictions.push(Prediction {
                id: r.id.clone(),
                label: labels[t].clone(),
                predicted: c.label,
                scores: c.scores.into_iter().collect(),
            });
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let total: usize = confusion[i].iter().sum();
                (total > 0).then(|| (l.clone(), confusion[i][i] as f64 / total as f64))
            })
            .collect();
        Ok(Evaluation {
            labels,
            accuracy: correct as f64 / records.len() as f64,
            confusion,
            per_class_accuracy,
            predictions,
        })
    }
}

/// One `(states, components)` configuration tried for a class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub n_states: usize,
    pub n_components: usize,
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the retained model.
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub classes: Vec<ClassReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    /// `(states, components)` pairs, tried in order.
    pub grid: Vec<(usize, usize)>,
    pub max_lag: usize,
    pub pca: Option<PcaTarget>,
    pub train: TrainConfig,
}

fn moments(frames: impl Iterator<Item = Vec<f64>>, dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pts: Vec<DVector<f64>> = frames.map(DVector::from_vec).collect();
    if pts.len() < 2 {
        return Err(Error::DegenerateData("need at least two present frames per class".into()));
    }
    let n = pts.len() as f64;
    let mean = pts.iter().fold(DVector::zeros(dim), |a, p| a + p) / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in &pts {
        let x = p - &mean;
        cov.ger(1.0, &x, &x, 1.0);
    }
    Ok((mean, cov / n))
}

/// Trains one model per label, keeping the highest-ELBO configuration.
pub fn train_bank(
    records: &[SequenceRecord],
    config: &BankConfig,
) -> Result<(ModelBank, TrainingReport)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.grid.is_empty() {
        return Err(Error::InvalidArgument("configuration grid is empty".into()));
    }
    config.train.validate()?;
    let mut by_label: BTreeMap<String, Vec<&SequenceRecord>> = BTreeMap::new();
    for r in records {
        let l = r.label.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("training sequence `{}` has no label", r.id))
        })?;
        by_label.entry(l).or_default().push(r);
    }

    let preprocessing = match config.pca {
        Some(target) => {
            let frames: Vec<&[f64]> = records.iter().flat_map(|r| r.present()).collect();
            Some(PcaTransform::fit(&frames, target)?)
        }
        None => None,
    };

    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    for (label, recs) in by_label {
        let seqs: Vec<Vec<Frame>> = match &preprocessing {
            Some(p) => recs.iter().map(|r| p.apply_frames(&r.frames)).collect::<Result<_>>()?,
            None => recs.iter().map(|r| r.frames.clone()).collect(),
        };
        let dim = seqs
            .iter()
            .flatten()
            .find_map(|f| f.values().map(<[f64]>::len))
            .ok_or_else(|| Error::DegenerateData(format!("class `{label}` has no present frames")))?;
        let (mean, cov) = moments(
            seqs.iter().flatten().filter_map(|f| f.values().map(<[f64]>::to_vec)),
            dim,
        )?;
        let mut candidates = Vec::new();
        let mut best: Option<(usize, TrainedModel)> = None;
        for &(n, m) in &config.grid {
            let hyper = default_hyper(n, m, config.max_lag, dim, &mean, &cov)
                .map_err(|e| match e {
                    Error::DegenerateData(msg) => {
                        Error::DegenerateData(format!("class `{label}`: {msg}"))
                    }
                    other => other,
                })?;
            let model = fit(&seqs, &hyper, &config.train)?;
            let elbo = model.final_elbo().unwrap_or(f64::NEG_INFINITY);
            candidates.push(Candidate {
                n_states: n,
                n_components: m,
                elbo,
                iterations: model.elbo_trace.len(),
                converged: model.converged,
            });
            let better = match &best {
                Some((_, b)) => elbo > b.final_elbo().unwrap_or(f64::NEG_INFINITY),
                None => true,
            };
            if better {
                best = Some((candidates.len() - 1, model));
            }
        }
        let (selected, model) = best.expect("grid is nonempty");
        models.insert(label.clone(), model);
        reports.push(ClassReport { label, candidates, selected });
    }
    let bank = ModelBank::new(models, preprocessing)?;
    Ok((bank, TrainingReport { classes: reports }))
}
