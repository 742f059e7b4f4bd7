//! Secret keys that restore target-domain accuracy: a discrete prompt
//! prepended to the input, or a bottleneck adapter with a skip connection
//! applied to every token embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Inputs, Tensor, Var};
use crate::encoder::{Vocab, CLS, UNK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptKey {
    text: String,
    token_ids: Vec<usize>,
}

impl PromptKey {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenizes `text` (no CLS) into a prompt key. Unknown words map to UNK.
pub fn make_prompt_key(text: &str, vocab: &Vocab, max_len: usize) -> Result<PromptKey> {
    let token_ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect();
    if token_ids.is_empty() {
        return Err(Error::Invalid("prompt key has no tokens".into()));
    }
    if token_ids.len() > max_len / 2 {
        return Err(Error::Invalid(format!(
            "prompt key has {} tokens, at most {} allowed for max_len {max_len}",
            token_ids.len(),
            max_len / 2
        )));
    }
    Ok(PromptKey {
        text: text.to_string(),
        token_ids,
    })
}

/// `[CLS, P_1..P_m, x_1..x_k]` where `token_ids` is `[CLS, x_1..x_n]` and
/// content is cut from the right so the result fits in `max_len`. The key is
/// never truncated.
pub fn prepend_prompt(key: &PromptKey, token_ids: &[usize], max_len: usize) -> Vec<usize> {
    let content = match token_ids.first() {
        Some(&CLS) => &token_ids[1..],
        _ => token_ids,
    };
    let room = max_len.saturating_sub(1 + key.len());
    let mut out = Vec::with_capacity(1 + key.len() + content.len().min(room));
    out.push(CLS);
    out.extend_from_slice(&key.token_ids);
    out.extend_from_slice(&content[..content.len().min(room)]);
    out
}

/// Bottleneck adapter `x ↦ relu(x·W_down + b_down)·W_up + b_up + x`, applied
/// to each token embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

pub const ADAPTER_NAMES: [&str; 4] = ["adapter.w_down", "adapter.b_down", "adapter.w_up", "adapter.b_up"];

/// Parameter count of a `d → m → d` adapter with biases.
pub fn adapter_param_count(dim: usize, bottleneck: usize) -> usize {
    dim * bottleneck + bottleneck + bottleneck * dim + dim
}

/// Identity-initialized adapter: `W_down` uniform in ±1/√d, `W_up` and both
/// biases zero.
pub fn init_adapter(dim: usize, bottleneck: usize, seed: u64) -> Result<AdapterParams> {
    if bottleneck == 0 || bottleneck >= dim {
        return Err(Error::Invalid(format!(
            "adapter bottleneck must satisfy 1 <= m < d, got m = {bottleneck}, d = {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let w_down = (0..dim * bottleneck).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(AdapterParams {
        w_down: Tensor::matrix(dim, bottleneck, w_down)?,
        b_down: Tensor::zeros(1, bottleneck),
        w_up: Tensor::zeros(bottleneck, dim),
        b_up: Tensor::zeros(1, dim),
    })
}

impl AdapterParams {
    pub fn dim(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            (ADAPTER_NAMES[0], &self.w_down),
            (ADAPTER_NAMES[1], &self.b_down),
            (ADAPTER_NAMES[2], &self.w_up),
            (ADAPTER_NAMES[3], &self.b_up),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            (ADAPTER_NAMES[0], &mut self.w_down),
            (ADAPTER_NAMES[1], &mut self.b_down),
            (ADAPTER_NAMES[2], &mut self.w_up),
            (ADAPTER_NAMES[3], &mut self.b_up),
        ]
    }

    pub fn declare(&self, g: &mut Graph, trainable: bool) -> Result<AdapterVars> {
        Ok(AdapterVars {
            w_down: g.input(ADAPTER_NAMES[0], self.w_down.rows(), self.w_down.cols(), trainable)?,
            b_down: g.input(ADAPTER_NAMES[1], 1, self.b_down.cols(), trainable)?,
            w_up: g.input(ADAPTER_NAMES[2], self.w_up.rows(), self.w_up.cols(), trainable)?,
            b_up: g.input(ADAPTER_NAMES[3], 1, self.b_up.cols(), trainable)?,
        })
    }
}

impl Inputs for AdapterParams {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Applies the adapter to every row of `x`.
pub fn adapter_graph(g: &mut Graph, a: &AdapterVars, x: Var) -> Result<Var> {
    let down = g.matmul(x, a.w_down)?;
    let down = g.add_row(down, a.b_down)?;
    let down = g.relu(down)?;
    let up = g.matmul(down, a.w_up)?;
    let up = g.add_row(up, a.b_up)?;
    g.add(up, x)
}

/// Adapter applied to a single `d`-dimensional vector.
pub fn adapter_forward(adapter: &AdapterParams, x: &[f64]) -> Result<Vec<f64>> {
    let (d, m) = (adapter.dim(), adapter.bottleneck());
    if x.len() != d {
        return Err(Error::shape(
            "adapter_forward",
            format!("input has {} dims, adapter expects {d}", x.len()),
        ));
    }
    let mut hidden = adapter.b_down.data().to_vec();
    for (i, xv) in x.iter().enumerate() {
        for (h, w) in hidden.iter_mut().zip(adapter.w_down.row_slice(i)) {
            *h += xv * w;
        }
    }
    let mut out: Vec<f64> = x.iter().zip(adapter.b_up.data()).map(|(a, b)| a + b).collect();
    for (j, h) in hidden.iter().enumerate().take(m) {
        if *h > 0.0 {
            for (o, w) in out.iter_mut().zip(adapter.w_up.row_slice(j)) {
                *o += h * w;
            }
        }
    }
    Ok(out)
}
