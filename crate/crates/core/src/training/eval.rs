use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::encoder::Example;
use crate::error::{Error, Result};
use crate::objectives::{mmd_distance_value, Mode};

use super::model::Model;

/// Examples encoded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Dev-set measurements at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub acc_source: f64,
    pub acc_target: Option<f64>,
    /// target accuracy with the secret key applied (key modes)
    pub acc_target_with_key: Option<f64>,
    pub eps_source: f64,
    pub eps_target: Option<f64>,
    pub mmd_st: Option<f64>,
    pub score: f64,
}

impl EvalReport {
    /// Fills the error rates and selection score from the accuracies.
    pub fn new(
        mode: Mode,
        step: usize,
        acc_source: f64,
        acc_target: Option<f64>,
        acc_target_with_key: Option<f64>,
        mmd_st: Option<f64>,
    ) -> Result<Self> {
        let mut r = EvalReport {
            step,
            acc_source,
            acc_target,
            acc_target_with_key,
            eps_source: 1.0 - acc_source,
            eps_target: acc_target.map(|a| 1.0 - a),
            mmd_st,
            score: 0.0,
        };
        r.score = selection_score(&r, mode)?;
        Ok(r)
    }
}

/// Checkpoint selection metric: `Acc_S` for plain, `Acc_S − Acc_T` for
/// untl, `Acc_S + Acc_Key − 2·Acc_T` for the key modes.
pub fn selection_score(r: &EvalReport, mode: Mode) -> Result<f64> {
    let target = || {
        r.acc_target
            .ok_or_else(|| Error::Invalid(format!("{mode} selection needs target accuracy")))
    };
    match mode {
        Mode::Plain => Ok(r.acc_source),
        Mode::Untl => Ok(r.acc_source - target()?),
        Mode::Prompt | Mode::Adapter => {
            let key = r
                .acc_target_with_key
                .ok_or_else(|| Error::Invalid(format!("{mode} selection needs key accuracy")))?;
            Ok(r.acc_source + key - 2.0 * target()?)
        }
    }
}

/// Fraction of argmax-correct predictions. The corpus must be labeled.
pub fn accuracy(model: &Model, corpus: &Corpus, with_key: bool) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid(format!("{}: empty corpus", corpus.provenance)));
    }
    if !corpus.is_labeled() {
        return Err(Error::Invalid(format!("{}: cannot evaluate an unlabeled corpus", corpus.provenance)));
    }
    let examples = corpus.examples(&model.vocab, model.config.model.max_len);
    let mut correct = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let pred = model.predict(chunk, with_key)?;
        correct += pred.iter().zip(chunk).filter(|(p, e)| Some(**p) == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// MMD between source and target features, averaged over aligned chunks of
/// [`EVAL_CHUNK`] rows. Leftover rows beyond the shorter corpus's last full
/// pairing are dropped; a corpus smaller than one chunk is used whole.
pub fn divergence_diagnostic(model: &Model, source: &Corpus, target: &Corpus) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Invalid("divergence diagnostic needs two non-empty corpora".into()));
    }
    let max_len = model.config.model.max_len;
    let s = source.examples(&model.vocab, max_len);
    let t = target.examples(&model.vocab, max_len);
    let n = s.len().min(t.len());
    let chunks: Vec<(usize, usize)> = if n < EVAL_CHUNK {
        vec![(0, n)]
    } else {
        (0..n / EVAL_CHUNK).map(|i| (i * EVAL_CHUNK, (i + 1) * EVAL_CHUNK)).collect()
    };
    let mut total = 0.0;
    for &(a, b) in &chunks {
        total += chunk_mmd(model, &s[a..b], &t[a..b])?;
    }
    Ok(total / chunks.len() as f64)
}

fn chunk_mmd(model: &Model, s: &[Example], t: &[Example]) -> Result<f64> {
    let hs = model.features(s, false)?;
    let ht = model.features(t, false)?;
    mmd_distance_value(&hs, &ht)
}

/// Dev corpora used for periodic evaluation. Only `source` is required in
/// plain mode.
#[derive(Debug, Clone, Copy)]
pub struct DevSets<'a> {
    pub source: &'a Corpus,
    pub target: Option<&'a Corpus>,
}

/// Full report on the dev sets.
pub fn evaluate(model: &Model, dev: DevSets<'_>, step: usize) -> Result<EvalReport> {
    let mode = model.mode();
    let acc_s = accuracy(model, dev.source, false)?;
    let (acc_t, acc_k, mmd) = match dev.target {
        Some(t) => (
            Some(accuracy(model, t, false)?),
            if mode.has_key() { Some(accuracy(model, t, true)?) } else { None },
            Some(divergence_diagnostic(model, dev.source, t)?),
        ),
        None if mode == Mode::Plain => (None, None, None),
        None => return Err(Error::Invalid(format!("{mode} evaluation needs a target dev set"))),
    };
    EvalReport::new(mode, step, acc_s, acc_t, acc_k, mmd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(s: f64, t: Option<f64>, k: Option<f64>) -> EvalReport {
        EvalReport {
            step: 0,
            acc_source: s,
            acc_target: t,
            acc_target_with_key: k,
            eps_source: 1.0 - s,
            eps_target: t.map(|t| 1.0 - t),
            mmd_st: None,
            score: 0.0,
        }
    }

    #[test]
    fn selection_formulas() {
        let r = report(77.4, Some(35.3), None);
        assert!((selection_score(&r, Mode::Untl).unwrap() - 42.1).abs() < 1e-9);
        let r = report(77.5, Some(36.0), Some(69.7));
        assert!((selection_score(&r, Mode::Prompt).unwrap() - 75.2).abs() < 1e-9);
        assert!((selection_score(&r, Mode::Adapter).unwrap() - 75.2).abs() < 1e-9);
        assert_eq!(selection_score(&r, Mode::Plain).unwrap(), 77.5);
        let r = report(0.6, Some(0.6), Some(0.6));
        assert_eq!(selection_score(&r, Mode::Untl).unwrap(), 0.0);
    }

    #[test]
    fn missing_fields_are_errors() {
        assert!(selection_score(&report(0.9, Some(0.3), None), Mode::Prompt).is_err());
        assert!(selection_score(&report(0.9, None, None), Mode::Untl).is_err());
        assert!(selection_score(&report(0.9, None, None), Mode::Plain).is_ok());
    }

    #[test]
    fn error_rates_complement_accuracy() {
        let r = EvalReport::new(Mode::Untl, 3, 0.7, Some(0.1), None, None).unwrap();
        assert_eq!(r.eps_source + r.acc_source, 1.0);
        assert_eq!(r.eps_target, Some(0.9));
    }
}
