//! Training objectives: task cross-entropy, kernel MMD and its clamped loss,
//! the domain-classifier loss, and their combinations for plain, UNTL,
//! prompt-key and adapter-key training.
//!
//! Every function here appends nodes to a [`Graph`] and returns the scalar
//! node, so gradients flow back into whatever produced the feature rows.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NoInputs, Tensor, Var};
use crate::encoder::{classify_graph, domain_logits_graph, EncoderVars};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Untl,
    Prompt,
    Adapter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Untl => "untl",
            Mode::Prompt => "prompt",
            Mode::Adapter => "adapter",
        }
    }

    pub fn has_key(self) -> bool {
        matches!(self, Mode::Prompt | Mode::Adapter)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "untl" => Ok(Mode::Untl),
            "prompt" => Ok(Mode::Prompt),
            "adapter" => Ok(Mode::Adapter),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Loss weights.
///
/// * `alpha` – weight of the key-domain/source MMD attraction
/// * `beta` – domain-classifier weight
/// * `lambda` – MMD term weight
/// * `c` – clamp on the source/target MMD
/// * `omega` – task cross-entropy scale
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub c: f64,
    pub omega: f64,
}

impl HyperParams {
    pub fn defaults(mode: Mode) -> Self {
        match mode {
            Mode::Plain => HyperParams {
                alpha: 0.0,
                beta: 0.0,
                lambda: 0.0,
                c: 10.0,
                omega: 1.0,
            },
            Mode::Untl => HyperParams {
                alpha: 0.0,
                beta: 0.5,
                lambda: 0.1,
                c: 10.0,
                omega: 1.0,
            },
            Mode::Prompt => HyperParams {
                alpha: 5.0,
                beta: 2.0,
                lambda: 0.1,
                c: 10.0,
                omega: 4.0,
            },
            Mode::Adapter => HyperParams {
                alpha: 10.0,
                beta: 1.5,
                lambda: 0.1,
                c: 10.0,
                omega: 2.0,
            },
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda, self.c, self.omega];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("hyperparameters must be finite".into()));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("beta and lambda must be >= 0".into()));
        }
        if self.c <= 0.0 || self.omega <= 0.0 {
            return Err(Error::Config("c and omega must be > 0".into()));
        }
        if mode.has_key() && self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be > 0 in key modes".into()));
        }
        Ok(())
    }
}

/// `exp(−‖z − z′‖²)`.
pub fn rbf_kernel(z: &[f64], z2: &[f64]) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(Error::shape("rbf_kernel", format!("{} vs {} dims", z.len(), z2.len())));
    }
    let d2: f64 = z.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2).exp())
}

fn mean_kernel(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sq_dist(a, b)?;
    let neg = g.scale(d, -1.0)?;
    let k = g.exp(neg)?;
    g.mean(k)
}

/// Biased (V-statistic) squared MMD between the row sets `s` and `t` under
/// the unit-bandwidth RBF kernel:
/// `mean k(s,s′) + mean k(t,t′) − 2·mean k(s,t)`, including `i = j` terms.
pub fn mmd_distance(g: &mut Graph, s: Var, t: Var) -> Result<Var> {
    let kss = mean_kernel(g, s, s)?;
    let ktt = mean_kernel(g, t, t)?;
    // both orientations of the cross term, so swapping S and T is bitwise exact
    let kst = mean_kernel(g, s, t)?;
    let kts = mean_kernel(g, t, s)?;
    let within = g.add(kss, ktt)?;
    let cross = g.add(kst, kts)?;
    g.sub(within, cross)
}

/// [`mmd_distance`] on plain feature matrices.
pub fn mmd_distance_value(s: &Tensor, t: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let sv = g.constant(s.clone())?;
    let tv = g.constant(t.clone())?;
    let d = mmd_distance(&mut g, sv, tv)?;
    Ok(g.eval(&NoInputs, d)?.item())
}

/// `−min(c, d)`.
pub fn clamp_loss(g: &mut Graph, distance: Var, c: f64) -> Result<Var> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::Invalid(format!("MMD clamp must be positive, got {c}")));
    }
    let m = g.min_const(distance, c)?;
    g.scale(m, -1.0)
}

/// Clamped MMD loss `−min(c, mmd(S, T))`, in `[−c, 0]`.
pub fn mmd_loss(g: &mut Graph, s: Var, t: Var, c: f64) -> Result<Var> {
    let d = mmd_distance(g, s, t)?;
    clamp_loss(g, d, c)
}

/// `ω · mean_i −log softmax(logits_i)[label_i]`.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize], omega: f64) -> Result<Var> {
    let [rows, classes] = g.shape(logits);
    if labels.len() != rows {
        return Err(Error::Invalid(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -omega)
}

/// Domain-classifier loss: mean cross-entropy of the source-like rows
/// against label 0 plus mean cross-entropy of the target rows against
/// label 1. The source-like set is the row-concatenation of `source_like`.
pub fn dc_loss(g: &mut Graph, enc: &EncoderVars, source_like: &[Var], target: Var) -> Result<Var> {
    if source_like.is_empty() {
        return Err(Error::Invalid("domain classifier needs source-like rows".into()));
    }
    let src = if source_like.len() == 1 {
        source_like[0]
    } else {
        g.concat_rows(source_like)?
    };
    let n_src = g.shape(src)[0];
    let n_tgt = g.shape(target)[0];
    let src_logits = domain_logits_graph(g, enc, src)?;
    let tgt_logits = domain_logits_graph(g, enc, target)?;
    let src_ce = ce_loss(g, src_logits, &vec![0; n_src], 1.0)?;
    let tgt_ce = ce_loss(g, tgt_logits, &vec![1; n_tgt], 1.0)?;
    g.add(src_ce, tgt_ce)
}

/// `α·mmd(P, S) − min(c, mmd(S, T))`. `key` is the target+key feature set.
pub fn prompt_mmd_loss(g: &mut Graph, key: Var, s: Var, t: Var, alpha: f64, c: f64) -> Result<Var> {
    let attract = mmd_distance(g, key, s)?;
    let attract = g.scale(attract, alpha)?;
    let separate = mmd_loss(g, s, t, c)?;
    g.add(attract, separate)
}

/// Task cross-entropy on adapter-transformed source features.
pub fn adapter_ce_loss(
    g: &mut Graph,
    enc: &EncoderVars,
    adapted_source: Var,
    labels: &[usize],
    omega: f64,
) -> Result<Var> {
    let logits = classify_graph(g, enc, adapted_source)?;
    ce_loss(g, logits, labels, omega)
}

/// Scalar objective with its weighted components' unweighted sub-losses.
#[derive(Debug, Clone, Copy)]
pub struct Terms {
    pub total: Var,
    /// `ω·L_CE`
    pub ce: Var,
    /// `ω·L_CE` on adapter-transformed source (adapter mode)
    pub adapter_ce: Option<Var>,
    /// unweighted domain-classifier loss; absent when β = 0
    pub dc: Option<Var>,
    /// unweighted MMD loss (clamped, or the key variant); absent when λ = 0
    pub mmd: Option<Var>,
}

/// Feature rows for one training step.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub source: Var,
    pub target: Option<Var>,
    /// target+key rows (prompted target, or adapter-transformed target)
    pub keyed: Option<Var>,
    /// adapter-transformed source rows
    pub adapted_source: Option<Var>,
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::Invalid(format!("objective needs {what} features")))
}

fn weighted_sum(g: &mut Graph, base: Var, parts: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut total = base;
    for &(w, v) in parts {
        if let Some(v) = v {
            let s = g.scale(v, w)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Task loss only: `ω·L_CE`.
pub fn plain_objective(g: &mut Graph, enc: &EncoderVars, f: &Features, labels: &[usize], hp: &HyperParams) -> Result<Terms> {
    let logits = classify_graph(g, enc, f.source)?;
    let ce = ce_loss(g, logits, labels, hp.omega)?;
    Ok(Terms {
        total: ce,
        ce,
        adapter_ce: None,
        dc: None,
        mmd: None,
    })
}

/// `ω·L_CE + β·L_DC(S, T) + λ·L_MMD(S, T)`.
pub fn untl_objective(g: &mut Graph, enc: &EncoderVars, f: &Features, labels: &[usize], hp: &HyperParams) -> Result<Terms> {
    let t = need(f.target, "target")?;
    let logits = classify_graph(g, enc, f.source)?;
    let ce = ce_loss(g, logits, labels, hp.omega)?;
    let dc = if hp.beta > 0.0 {
        Some(dc_loss(g, enc, &[f.source], t)?)
    } else {
        None
    };
    let mmd = if hp.lambda > 0.0 {
        Some(mmd_loss(g, f.source, t, hp.c)?)
    } else {
        None
    };
    let total = weighted_sum(g, ce, &[(hp.beta, dc), (hp.lambda, mmd)])?;
    Ok(Terms {
        total,
        ce,
        adapter_ce: None,
        dc,
        mmd,
    })
}

/// `ω·L_CE + β·L_DC([P, S], T) + λ·(α·mmd(P, S) − min(c, mmd(S, T)))`.
pub fn prompt_objective(g: &mut Graph, enc: &EncoderVars, f: &Features, labels: &[usize], hp: &HyperParams) -> Result<Terms> {
    let t = need(f.target, "target")?;
    let p = need(f.keyed, "target+prompt")?;
    let logits = classify_graph(g, enc, f.source)?;
    let ce = ce_loss(g, logits, labels, hp.omega)?;
    let dc = if hp.beta > 0.0 {
        Some(dc_loss(g, enc, &[p, f.source], t)?)
    } else {
        None
    };
    let mmd = if hp.lambda > 0.0 {
        Some(prompt_mmd_loss(g, p, f.source, t, hp.alpha, hp.c)?)
    } else {
        None
    };
    let total = weighted_sum(g, ce, &[(hp.beta, dc), (hp.lambda, mmd)])?;
    Ok(Terms {
        total,
        ce,
        adapter_ce: None,
        dc,
        mmd,
    })
}

/// `ω·L_CE + ω·L_CE(adapter(S)) + β·L_DC([A, S], T) + λ·(α·mmd(A, S) − min(c, mmd(S, T)))`.
pub fn adapter_objective(g: &mut Graph, enc: &EncoderVars, f: &Features, labels: &[usize], hp: &HyperParams) -> Result<Terms> {
    let t = need(f.target, "target")?;
    let a = need(f.keyed, "target+adapter")?;
    let sa = need(f.adapted_source, "adapter-transformed source")?;
    let logits = classify_graph(g, enc, f.source)?;
    let ce = ce_loss(g, logits, labels, hp.omega)?;
    let adapter_ce = adapter_ce_loss(g, enc, sa, labels, hp.omega)?;
    let dc = if hp.beta > 0.0 {
        Some(dc_loss(g, enc, &[a, f.source], t)?)
    } else {
        None
    };
    let mmd = if hp.lambda > 0.0 {
        Some(prompt_mmd_loss(g, a, f.source, t, hp.alpha, hp.c)?)
    } else {
        None
    };
    let base = g.add(ce, adapter_ce)?;
    let total = weighted_sum(g, base, &[(hp.beta, dc), (hp.lambda, mmd)])?;
    Ok(Terms {
        total,
        ce,
        adapter_ce: Some(adapter_ce),
        dc,
        mmd,
    })
}

pub fn objective(
    mode: Mode,
    g: &mut Graph,
    enc: &EncoderVars,
    f: &Features,
    labels: &[usize],
    hp: &HyperParams,
) -> Result<Terms> {
    match mode {
        Mode::Plain => plain_objective(g, enc, f, labels, hp),
        Mode::Untl => untl_objective(g, enc, f, labels, hp),
        Mode::Prompt => prompt_objective(g, enc, f, labels, hp),
        Mode::Adapter => adapter_objective(g, enc, f, labels, hp),
    }
}
