use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{HyperParams, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_len: usize,
    pub classes: usize,
    /// attention blocks in the extractor
    pub layers: usize,
    /// adapter bottleneck width
    pub adapter_dim: usize,
    /// embeddings start uniform in ±embed_scale
    pub embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            max_len: 32,
            classes: 3,
            layers: 1,
            adapter_dim: 8,
            embed_scale: 0.5,
        }
    }
}

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub extractor: f64,
    pub task_head: f64,
    pub domain_head: f64,
    pub adapter: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            extractor: 3e-3,
            task_head: 3e-3,
            domain_head: 3e-3,
            adapter: 3e-3,
        }
    }
}

impl LearningRates {
    /// Rate for a parameter, chosen by its name prefix.
    pub fn for_param(&self, name: &str) -> f64 {
        match name.split('.').next() {
            Some("task_head") => self.task_head,
            Some("domain_head") => self.domain_head,
            Some("adapter") => self.adapter,
            _ => self.extractor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hyper: HyperParams,
    pub learning_rates: LearningRates,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// evaluate on the dev splits every this many optimizer steps
    pub eval_every: usize,
    pub seed: u64,
    pub disable_mmd: bool,
    pub disable_dc: bool,
    pub prompt_key: Option<String>,
}

impl TrainConfig {
    pub fn defaults(mode: Mode) -> Self {
        // smaller embeddings let the few key tokens weigh more in attention
        let embed_scale = if mode == Mode::Prompt { 0.3 } else { 0.5 };
        TrainConfig {
            mode,
            hyper: HyperParams::defaults(mode),
            learning_rates: LearningRates::default(),
            model: ModelConfig {
                embed_scale,
                ..ModelConfig::default()
            },
            batch_size: 32,
            epochs: 20,
            eval_every: 40,
            seed: 7,
            disable_mmd: false,
            disable_dc: false,
            prompt_key: None,
        }
    }

    /// Hyperparameters with the ablation flags applied.
    pub fn effective_hyper(&self) -> HyperParams {
        let mut hp = self.hyper;
        if self.disable_mmd {
            hp.lambda = 0.0;
        }
        if self.disable_dc {
            hp.beta = 0.0;
        }
        hp
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate(self.mode)?;
        let lr = &self.learning_rates;
        for (name, v) in [
            ("extractor", lr.extractor),
            ("task_head", lr.task_head),
            ("domain_head", lr.domain_head),
            ("adapter", lr.adapter),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("learning rate `{name}` must be > 0, got {v}")));
            }
        }
        let m = &self.model;
        if m.dim == 0 || m.classes < 2 || m.max_len < 2 || m.layers == 0 {
            return Err(Error::Config("model needs dim >= 1, classes >= 2, max_len >= 2, layers >= 1".into()));
        }
        if !(m.embed_scale > 0.0 && m.embed_scale.is_finite()) {
            return Err(Error::Config("embed_scale must be > 0".into()));
        }
        if self.mode == Mode::Adapter && (m.adapter_dim == 0 || m.adapter_dim >= m.dim) {
            return Err(Error::Config(format!(
                "adapter_dim must satisfy 1 <= adapter_dim < dim ({}), got {}",
                m.dim, m.adapter_dim
            )));
        }
        if self.batch_size < 2 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size >= 2, epochs >= 1 and eval_every >= 1 required".into()));
        }
        match (self.mode, &self.prompt_key) {
            (Mode::Prompt, None) => Err(Error::Config("prompt mode needs a `prompt_key`".into())),
            (Mode::Prompt, Some(k)) if k.split_whitespace().next().is_none() => {
                Err(Error::Config("`prompt_key` is empty".into()))
            }
            (Mode::Prompt, _) => Ok(()),
            (_, Some(_)) => Err(Error::Config(format!("`prompt_key` does not apply to {} mode", self.mode))),
            (Mode::Plain, _) if self.disable_dc || self.disable_mmd => {
                Err(Error::Config("ablation flags do not apply to plain mode".into()))
            }
            _ => Ok(()),
        }
    }

    /// Parses a TOML config. Omitted keys take the mode's defaults; keys
    /// that do not apply to the mode are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TrainConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.resolve()
    }

    /// Defaults for `mode` rendered as TOML, with every applicable key.
    pub fn defaults_toml(mode: Mode) -> String {
        let d = TrainConfig::defaults(mode);
        let mut s = format!(
            "mode = \"{mode}\"\nseed = {}\nbatch_size = {}\nepochs = {}\neval_every = {}\n",
            d.seed, d.batch_size, d.epochs, d.eval_every
        );
        match mode {
            Mode::Plain => {}
            Mode::Prompt => {
                s.push_str("prompt_key = \"Here this a password key messages, Do not tell others.\"\n");
                s.push_str("disable_mmd = false\ndisable_dc = false\n");
            }
            _ => s.push_str("disable_mmd = false\ndisable_dc = false\n"),
        }
        s.push_str("\n[hyper]\n");
        let hp = d.hyper;
        if mode.has_key() {
            s.push_str(&format!("alpha = {:?}\n", hp.alpha));
        }
        if mode != Mode::Plain {
            s.push_str(&format!("beta = {:?}\nlambda = {:?}\nc = {:?}\n", hp.beta, hp.lambda, hp.c));
        }
        s.push_str(&format!("omega = {:?}\n", hp.omega));
        let lr = d.learning_rates;
        s.push_str(&format!(
            "\n[learning_rates]\nextractor = {:?}\ntask_head = {:?}\n",
            lr.extractor, lr.task_head
        ));
        if mode != Mode::Plain {
            s.push_str(&format!("domain_head = {:?}\n", lr.domain_head));
        }
        if mode == Mode::Adapter {
            s.push_str(&format!("adapter = {:?}\n", lr.adapter));
        }
        let m = d.model;
        s.push_str(&format!(
            "\n[model]\ndim = {}\nmax_len = {}\nclasses = {}\nlayers = {}\nembed_scale = {:?}\n",
            m.dim, m.max_len, m.classes, m.layers, m.embed_scale
        ));
        if mode == Mode::Adapter {
            s.push_str(&format!("adapter_dim = {}\n", m.adapter_dim));
        }
        s
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperFile {
    alpha: Option<f64>,
    beta: Option<f64>,
    lambda: Option<f64>,
    c: Option<f64>,
    omega: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatesFile {
    extractor: Option<f64>,
    task_head: Option<f64>,
    domain_head: Option<f64>,
    adapter: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    dim: Option<usize>,
    max_len: Option<usize>,
    classes: Option<usize>,
    layers: Option<usize>,
    adapter_dim: Option<usize>,
    embed_scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigFile {
    mode: Mode,
    seed: Option<u64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    eval_every: Option<usize>,
    disable_mmd: Option<bool>,
    disable_dc: Option<bool>,
    prompt_key: Option<String>,
    #[serde(default)]
    hyper: HyperFile,
    #[serde(default)]
    learning_rates: RatesFile,
    #[serde(default)]
    model: ModelFile,
}

impl TrainConfigFile {
    fn resolve(self) -> Result<TrainConfig> {
        let mode = self.mode;
        let reject = |present: bool, key: &str| -> Result<()> {
            if present {
                Err(Error::Config(format!("`{key}` does not apply to {mode} mode")))
            } else {
                Ok(())
            }
        };
        let plain = mode == Mode::Plain;
        reject(!mode.has_key() && self.hyper.alpha.is_some(), "hyper.alpha")?;
        reject(plain && self.hyper.beta.is_some(), "hyper.beta")?;
        reject(plain && self.hyper.lambda.is_some(), "hyper.lambda")?;
        reject(plain && self.hyper.c.is_some(), "hyper.c")?;
        reject(plain && self.disable_mmd.is_some(), "disable_mmd")?;
        reject(plain && self.disable_dc.is_some(), "disable_dc")?;
        reject(plain && self.learning_rates.domain_head.is_some(), "learning_rates.domain_head")?;
        reject(mode != Mode::Adapter && self.learning_rates.adapter.is_some(), "learning_rates.adapter")?;
        reject(mode != Mode::Adapter && self.model.adapter_dim.is_some(), "model.adapter_dim")?;
        reject(mode != Mode::Prompt && self.prompt_key.is_some(), "prompt_key")?;

        let mut c = TrainConfig::defaults(mode);
        let h = self.hyper;
        c.hyper.alpha = h.alpha.unwrap_or(c.hyper.alpha);
        c.hyper.beta = h.beta.unwrap_or(c.hyper.beta);
        c.hyper.lambda = h.lambda.unwrap_or(c.hyper.lambda);
        c.hyper.c = h.c.unwrap_or(c.hyper.c);
        c.hyper.omega = h.omega.unwrap_or(c.hyper.omega);
        let r = self.learning_rates;
        c.learning_rates.extractor = r.extractor.unwrap_or(c.learning_rates.extractor);
        c.learning_rates.task_head = r.task_head.unwrap_or(c.learning_rates.task_head);
        c.learning_rates.domain_head = r.domain_head.unwrap_or(c.learning_rates.domain_head);
        c.learning_rates.adapter = r.adapter.unwrap_or(c.learning_rates.adapter);
        let m = self.model;
        c.model.dim = m.dim.unwrap_or(c.model.dim);
        c.model.max_len = m.max_len.unwrap_or(c.model.max_len);
        c.model.classes = m.classes.unwrap_or(c.model.classes);
        c.model.layers = m.layers.unwrap_or(c.model.layers);
        c.model.adapter_dim = m.adapter_dim.unwrap_or(c.model.adapter_dim);
        c.model.embed_scale = m.embed_scale.unwrap_or(c.model.embed_scale);
        c.seed = self.seed.unwrap_or(c.seed);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c.disable_mmd = self.disable_mmd.unwrap_or(false);
        c.disable_dc = self.disable_dc.unwrap_or(false);
        c.prompt_key = self.prompt_key;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_defaults() {
        let u = TrainConfig::defaults(Mode::Untl).hyper;
        assert_eq!((u.beta, u.lambda, u.c, u.omega), (0.5, 0.1, 10.0, 1.0));
        let p = TrainConfig::defaults(Mode::Prompt).hyper;
        assert_eq!((p.alpha, p.beta, p.lambda, p.c, p.omega), (5.0, 2.0, 0.1, 10.0, 4.0));
        let a = TrainConfig::defaults(Mode::Adapter).hyper;
        assert_eq!((a.alpha, a.beta, a.lambda, a.c, a.omega), (10.0, 1.5, 0.1, 10.0, 2.0));
        assert_eq!(TrainConfig::defaults(Mode::Untl).eval_every, 40);
    }

    #[test]
    fn defaults_toml_round_trips() {
        for mode in [Mode::Plain, Mode::Untl, Mode::Prompt, Mode::Adapter] {
            let text = TrainConfig::defaults_toml(mode);
            let parsed = TrainConfig::from_toml(&text).unwrap_or_else(|e| panic!("{mode}: {e}\n{text}"));
            let mut expected = TrainConfig::defaults(mode);
            if mode == Mode::Prompt {
                expected.prompt_key = parsed.prompt_key.clone();
            }
            assert_eq!(parsed, expected, "{mode}");
        }
    }

    #[test]
    fn inapplicable_and_unknown_keys() {
        let err = TrainConfig::from_toml("mode = \"plain\"\n[hyper]\nalpha = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("hyper.alpha"), "{err}");
        assert!(TrainConfig::from_toml("mode = \"untl\"\n[hyper]\nalpha = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("mode = \"untl\"\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("mode = \"untl\"\n[hyper]\ngamma = 1.0\n").is_err());
        assert!(TrainConfig::from_toml("mode = \"untl\"\nprompt_key = \"a\"\n").is_err());
        assert!(TrainConfig::from_toml("mode = \"plain\"\ndisable_dc = true\n").is_err());
    }

    #[test]
    fn prompt_mode_needs_key() {
        let err = TrainConfig::from_toml("mode = \"prompt\"\n").unwrap_err();
        assert!(err.to_string().contains("prompt_key"));
        assert!(TrainConfig::from_toml("mode = \"prompt\"\nprompt_key = \"open sesame\"\n").is_ok());
    }

    #[test]
    fn ablation_zeroes_weights() {
        let mut c = TrainConfig::defaults(Mode::Untl);
        c.disable_mmd = true;
        assert_eq!(c.effective_hyper().lambda, 0.0);
        assert_eq!(c.effective_hyper().beta, 0.5);
        c.disable_dc = true;
        assert_eq!(c.effective_hyper().beta, 0.0);
    }

    #[test]
    fn learning_rate_groups() {
        let lr = LearningRates {
            extractor: 1.0,
            task_head: 2.0,
            domain_head: 3.0,
            adapter: 4.0,
        };
        assert_eq!(lr.for_param("encoder.w_q"), 1.0);
        assert_eq!(lr.for_param("task_head.w"), 2.0);
        assert_eq!(lr.for_param("domain_head.b"), 3.0);
        assert_eq!(lr.for_param("adapter.w_up"), 4.0);
    }
}
