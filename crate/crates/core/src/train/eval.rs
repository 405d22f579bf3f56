//! VQA accuracy, per-type reports and probability-averaging ensembles.

use super::vqa::{VqaModel, VqaSample};
use crate::data::QuestionType;
use crate::error::{Error, Result};
use crate::numerics::{argmax, ParamStore, Real};

/// `min(#annotators agreeing with the prediction / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, annotators: &[String]) -> Result<f64> {
    if annotators.is_empty() {
        return Err(Error::InvalidInput("no annotator answers".into()));
    }
    let agree = annotators.iter().filter(|a| a.as_str() == predicted).count();
    Ok((agree as f64 / 3.0).min(1.0))
}

/// Per-type and overall accuracies in percent. A type with no questions is
/// `None` rather than zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub yes_no: Option<f64>,
    pub number: Option<f64>,
    pub other: Option<f64>,
    pub overall: Option<f64>,
    /// Question counts in `QuestionType::ALL` order.
    pub counts: [usize; 3],
}

impl EvalReport {
    pub fn by_type(&self, t: QuestionType) -> Option<f64> {
        match t {
            QuestionType::YesNo => self.yes_no,
            QuestionType::Number => self.number,
            QuestionType::Other => self.other,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Scores `(type, prediction, annotators)` triples.
pub fn score_predictions<'a, I>(items: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = (QuestionType, &'a str, &'a [String])>,
{
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (t, pred, ann) in items {
        let k = QuestionType::ALL.iter().position(|&x| x == t).expect("closed set");
        sums[k] += vqa_accuracy(pred, ann)?;
        counts[k] += 1;
    }
    let pct = |s: f64, n: usize| (n > 0).then(|| 100.0 * s / n as f64);
    let total: usize = counts.iter().sum();
    Ok(EvalReport {
        yes_no: pct(sums[0], counts[0]),
        number: pct(sums[1], counts[1]),
        other: pct(sums[2], counts[2]),
        overall: pct(sums.iter().sum(), total),
        counts,
    })
}

pub fn predict<T: Real>(model: &VqaModel, store: &ParamStore<T>, sample: &VqaSample<T>) -> Result<String> {
    let d = model.distribution(store, sample)?;
    Ok(model.answers()[argmax(&d)].clone())
}

pub fn evaluate<T: Real>(model: &VqaModel, store: &ParamStore<T>, samples: &[VqaSample<T>]) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| predict(model, store, s))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.qtype, p.as_str(), s.annotators.as_slice())),
    )
}

/// Fraction of questions whose top answer equals the majority annotator
/// answer.
pub fn simple_accuracy<T: Real>(model: &VqaModel, store: &ParamStore<T>, samples: &[VqaSample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut hits = 0;
    for s in samples {
        if predict(model, store, s)? == s.majority {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Element-wise mean, summed in member order.
pub fn average_distributions(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble of zero members".into()))?;
    if let Some(bad) = dists.iter().find(|d| d.len() != first.len()) {
        return Err(Error::InvalidInput(format!(
            "answer vocabularies differ in size: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    let m = dists.len() as f64;
    Ok((0..first.len())
        .map(|i| dists.iter().map(|d| d[i]).sum::<f64>() / m)
        .collect())
}

/// One ensemble member with the samples it reads (members trained on
/// different region features see different inputs for the same question).
pub struct Member<'a, T> {
    pub model: &'a VqaModel,
    pub store: &'a ParamStore<T>,
    pub samples: &'a [VqaSample<T>],
}

fn check_members<T>(members: &[Member<'_, T>]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble of zero members".into()))?;
    for m in members {
        if m.model.answers() != first.model.answers() {
            return Err(Error::InvalidInput("ensemble members use different answer vocabularies".into()));
        }
        if m.samples.len() != first.samples.len()
            || m.samples.iter().zip(first.samples).any(|(a, b)| a.id != b.id)
        {
            return Err(Error::InvalidInput("ensemble members see different questions".into()));
        }
    }
    Ok(())
}

/// Mean of the members' answer distributions for question `index`.
pub fn ensemble_predict<T: Real>(members: &[Member<'_, T>], index: usize) -> Result<Vec<f64>> {
    check_members(members)?;
    let dists = members
        .iter()
        .map(|m| m.model.distribution(m.store, &m.samples[index]))
        .collect::<Result<Vec<_>>>()?;
    average_distributions(&dists)
}

/// Scores the averaged distributions of all members.
pub fn evaluate_ensemble<T: Real>(members: &[Member<'_, T>]) -> Result<EvalReport> {
    check_members(members)?;
    let answers = members[0].model.answers();
    let samples = members[0].samples;
    let mut preds = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let d = ensemble_predict(members, i)?;
        preds.push(answers[argmax(&d)].clone());
    }
    score_predictions(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.qtype, p.as_str(), s.annotators.as_slice())),
    )
}
