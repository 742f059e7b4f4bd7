use serde::{Deserialize, Serialize};

use crate::data::{paired_batches, Corpus, SyntheticCorpora};
use crate::encoder::{Domain, Example, Vocab};
use crate::error::{Error, Result};
use crate::objectives::Mode;

use super::adam::{adam_step, AdamState, ParamSlot};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::{evaluate, DevSets, EvalReport};
use super::model::Model;

/// Corpora for one training run. Plain mode needs only the source side;
/// a target dev set, when given, is still evaluated.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocab,
    pub source_train: Corpus,
    pub source_dev: Corpus,
    pub target_train: Option<Corpus>,
    pub target_dev: Option<Corpus>,
}

impl TrainData {
    pub fn from_synthetic(c: &SyntheticCorpora) -> Self {
        TrainData {
            vocab: c.vocab.clone(),
            source_train: c.source.train.clone(),
            source_dev: c.source.dev.clone(),
            target_train: Some(c.target.train.clone()),
            target_dev: Some(c.target.dev.clone()),
        }
    }

    fn check(&self, mode: Mode) -> Result<()> {
        let expect = |c: &Corpus, d: Domain| -> Result<()> {
            match c.domain() {
                None => Err(Error::Invalid(format!("{}: empty corpus", c.provenance))),
                Some(found) if found != d => Err(Error::Invalid(format!(
                    "{}: expected a {d} corpus, found {found}",
                    c.provenance
                ))),
                _ => Ok(()),
            }
        };
        expect(&self.source_train, Domain::Source)?;
        expect(&self.source_dev, Domain::Source)?;
        if !self.source_train.is_labeled() {
            return Err(Error::Invalid("source training data must be labeled".into()));
        }
        if mode != Mode::Plain && (self.target_train.is_none() || self.target_dev.is_none()) {
            return Err(Error::Invalid(format!("{mode} mode needs target train and dev corpora")));
        }
        if let Some(t) = &self.target_train {
            expect(t, Domain::Target)?;
        }
        if let Some(t) = &self.target_dev {
            expect(t, Domain::Target)?;
        }
        Ok(())
    }
}

/// Batch losses at an evaluation step. Sub-losses are unweighted except
/// for the `ω` inside the cross-entropy terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub adapter_ce: Option<f64>,
    pub dc: Option<f64>,
    pub mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    #[serde(flatten)]
    pub report: EvalReport,
    pub losses: StepLosses,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
}

impl TrainOutcome {
    /// One JSON object per evaluation.
    pub fn history_jsonl(&self) -> String {
        let mut s = String::new();
        for h in &self.history {
            s.push_str(&serde_json::to_string(h).expect("history serializes"));
            s.push('\n');
        }
        s
    }

    /// Report of the selected checkpoint.
    pub fn best_report(&self) -> &EvalReport {
        &self
            .history
            .iter()
            .find(|h| h.report.step == self.checkpoint.best_step)
            .expect("best step is in the history")
            .report
    }
}

/// Trains per `config`, evaluating on the dev sets every `eval_every` steps
/// and after the last step. Returns the model with the highest selection
/// score (earliest on ties) and the evaluation history.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    data.check(config.mode)?;
    let mode = config.mode;
    let mut model = Model::new(config, &data.vocab)?;
    let max_len = config.model.max_len;
    let source = data.source_train.examples(&model.vocab, max_len);
    let target: Vec<Example> = match (&data.target_train, mode) {
        (Some(t), m) if m != Mode::Plain => t.examples(&model.vocab, max_len),
        _ => Vec::new(),
    };
    let n_target = if mode == Mode::Plain { source.len() } else { target.len() };
    let schedule = paired_batches(
        source.len(),
        n_target,
        config.batch_size,
        config.seed.wrapping_add(2),
        config.epochs,
    )?;
    let total_steps = schedule.total_steps();
    let hyper = config.effective_hyper();
    let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let dev = DevSets {
        source: &data.source_dev,
        target: data.target_dev.as_ref(),
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for (i, (si, ti)) in schedule.enumerate() {
        let step = i + 1;
        let s: Vec<Example> = si.iter().map(|&k| source[k].clone()).collect();
        let t: Vec<Example> = if mode == Mode::Plain {
            Vec::new()
        } else {
            ti.iter().map(|&k| target[k].clone()).collect()
        };
        let mut sg = model.step_graph(&s, &t, &hyper)?;
        let g = &mut sg.graph;
        g.forward(&model)?;
        // + 0.0 turns a -0.0 loss into 0.0 for the history file
        let value = |v| g.value(v).map(|t| t.item() + 0.0);
        let losses = StepLosses {
            total: value(sg.terms.total)?,
            ce: value(sg.terms.ce)?,
            adapter_ce: sg.terms.adapter_ce.map(value).transpose()?,
            dc: sg.terms.dc.map(value).transpose()?,
            mmd: sg.terms.mmd.map(value).transpose()?,
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: losses.total,
            });
        }
        g.backward(sg.terms.total)?;
        let vars = sg.param_vars();
        let lr = config.learning_rates;
        let mut named = model.tensors_mut();
        let mut slots: Vec<ParamSlot<'_>> = named
            .iter_mut()
            .zip(&vars)
            .map(|((name, value), &v)| ParamSlot {
                name: name.as_str(),
                value,
                grad: sg.graph.grad(v),
                lr: lr.for_param(name.as_str()),
            })
            .collect();
        adam_step(&mut adam, &mut slots)?;

        if step % config.eval_every == 0 || step == total_steps {
            let report = evaluate(&model, dev, step)?;
            if best.as_ref().is_none_or(|(score, _, _)| report.score > *score) {
                best = Some((report.score, step, model.clone()));
            }
            history.push(HistoryEntry { report, losses });
        }
    }
    let (best_score, best_step, model) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            best_score,
            best_step,
        },
        history,
    })
}
