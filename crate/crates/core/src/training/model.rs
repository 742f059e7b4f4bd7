use crate::diffcore::{Graph, Inputs, Tensor, Var};
use crate::encoder::{encode_graph, EncoderParams, EncoderVars, Example, Vocab};
use crate::error::{Error, Result};
use crate::keys::{init_adapter, make_prompt_key, prepend_prompt, AdapterParams, AdapterVars, PromptKey};
use crate::objectives::{objective, Features, Mode, Terms};

use super::config::TrainConfig;

/// Everything needed to run the trained network: weights, vocabulary and
/// the secret key of the key modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub adapter: Option<AdapterParams>,
    pub prompt: Option<PromptKey>,
}

impl Model {
    /// Fresh model for `config`. In prompt mode the key's words are added to
    /// the vocabulary so the key owns dedicated embeddings.
    pub fn new(config: &TrainConfig, vocab: &Vocab) -> Result<Self> {
        config.validate()?;
        let mut vocab = vocab.clone();
        let prompt = match &config.prompt_key {
            Some(text) if config.mode == Mode::Prompt => {
                for w in text.split_whitespace() {
                    vocab.insert(&w.to_lowercase());
                }
                Some(make_prompt_key(text, &vocab, config.model.max_len)?)
            }
            _ => None,
        };
        let m = &config.model;
        let encoder = EncoderParams::init_layers(vocab.len(), m.dim, m.classes, m.layers, m.embed_scale, config.seed);
        let adapter = match config.mode {
            Mode::Adapter => Some(init_adapter(m.dim, m.adapter_dim, config.seed.wrapping_add(1))?),
            _ => None,
        };
        Ok(Model {
            config: config.clone(),
            vocab,
            encoder,
            adapter,
            prompt,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Named tensors in checkpoint order: encoder and heads, then adapter.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.tensors();
        if let Some(a) = &self.adapter {
            v.extend(a.tensors().map(|(n, t)| (n.to_string(), t)));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.encoder.tensors_mut();
        if let Some(a) = &mut self.adapter {
            v.extend(a.tensors_mut().map(|(n, t)| (n.to_string(), t)));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Token ids as fed to the encoder, with the prompt prefix when
    /// `with_key` is set in prompt mode.
    pub fn input_ids(&self, token_ids: &[usize], with_key: bool) -> Vec<usize> {
        match (&self.prompt, with_key) {
            (Some(k), true) => prepend_prompt(k, token_ids, self.config.model.max_len),
            _ => token_ids.to_vec(),
        }
    }

    /// Pooled features, one row per sequence. `with_key` applies the key
    /// (prompt prefix or adapter); it is an error for keyless modes.
    pub fn features(&self, examples: &[Example], with_key: bool) -> Result<Tensor> {
        if with_key && !self.mode().has_key() {
            return Err(Error::Invalid(format!("{} checkpoints have no secret key", self.mode())));
        }
        let seqs: Vec<Vec<usize>> = examples.iter().map(|e| self.input_ids(&e.token_ids, with_key)).collect();
        let mut g = Graph::new();
        let enc = self.encoder.declare(&mut g, false)?;
        let adapter = match (&self.adapter, with_key) {
            (Some(a), true) => Some(a.declare(&mut g, false)?),
            _ => None,
        };
        let h = encode_graph(&mut g, &enc, adapter.as_ref(), &seqs)?;
        g.eval(self, h)
    }

    /// Task predictions (argmax of the task logits).
    pub fn predict(&self, examples: &[Example], with_key: bool) -> Result<Vec<usize>> {
        let h = self.features(examples, with_key)?;
        let (n, d) = h.dims2()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let logits = crate::encoder::classify(&self.encoder, &h.data()[i * d..(i + 1) * d])?;
            out.push(crate::encoder::argmax(&logits));
        }
        Ok(out)
    }

    /// Builds the training objective for one batch. `target` is ignored in
    /// plain mode.
    pub fn step_graph(&self, source: &[Example], target: &[Example], hyper: &crate::objectives::HyperParams) -> Result<StepGraph> {
        let labels: Vec<usize> = source
            .iter()
            .map(|e| e.label.ok_or_else(|| Error::Invalid("source example without a label".into())))
            .collect::<Result<_>>()?;
        let mode = self.mode();
        let mut g = Graph::new();
        let enc = self.encoder.declare(&mut g, true)?;
        let adapter = self.adapter.as_ref().map(|a| a.declare(&mut g, true)).transpose()?;

        let ns = source.len();
        let nt = target.len();
        let mut seqs: Vec<Vec<usize>> = source.iter().map(|e| e.token_ids.clone()).collect();
        if mode != Mode::Plain {
            seqs.extend(target.iter().map(|e| e.token_ids.clone()));
        }
        if mode == Mode::Prompt {
            seqs.extend(target.iter().map(|e| self.input_ids(&e.token_ids, true)));
        }
        let h = encode_graph(&mut g, &enc, None, &seqs)?;
        let src = g.slice_rows(h, 0, ns)?;
        let mut f = Features {
            source: src,
            target: None,
            keyed: None,
            adapted_source: None,
        };
        if mode != Mode::Plain {
            f.target = Some(g.slice_rows(h, ns, ns + nt)?);
        }
        if mode == Mode::Prompt {
            f.keyed = Some(g.slice_rows(h, ns + nt, ns + 2 * nt)?);
        }
        if let Some(a) = &adapter {
            let seqs: Vec<Vec<usize>> = source.iter().chain(target).map(|e| e.token_ids.clone()).collect();
            let ha = encode_graph(&mut g, &enc, Some(a), &seqs)?;
            f.adapted_source = Some(g.slice_rows(ha, 0, ns)?);
            f.keyed = Some(g.slice_rows(ha, ns, ns + nt)?);
        }
        let terms = objective(mode, &mut g, &enc, &f, &labels, hyper)?;
        Ok(StepGraph {
            graph: g,
            encoder: enc,
            adapter,
            terms,
        })
    }
}

impl Inputs for Model {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.encoder
            .lookup(name)
            .or_else(|| self.adapter.as_ref().and_then(|a| a.lookup(name)))
    }
}

/// One step's objective graph.
pub struct StepGraph {
    pub graph: Graph,
    pub encoder: EncoderVars,
    pub adapter: Option<AdapterVars>,
    pub terms: Terms,
}

impl StepGraph {
    /// Graph variables in the same order as [`Model::tensors`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = self.encoder.all();
        if let Some(a) = &self.adapter {
            v.extend([a.w_down, a.b_down, a.w_up, a.b_up]);
        }
        v
    }
}
