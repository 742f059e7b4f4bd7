//! The feature extractor: whitespace tokenizer, embedding table,
//! single-head self-attention blocks (one by default) each followed by a
//! position-wise feed-forward layer, and CLS pooling. The task classifier
//! and domain classifier are single linear heads on top of the pooled
//! feature.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Inputs, Tensor, Var};
use crate::error::{Error, Result};
use crate::keys::{adapter_graph, AdapterParams, AdapterVars};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocab { tokens, index }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) || t.to_lowercase() != t {
                return Err(Error::Invalid(format!("invalid vocabulary token {t:?}")));
            }
            if v.index.contains_key(t) {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    fn push(&mut self, t: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(t.to_string());
        self.index.insert(t.to_string(), id);
        id
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        let t = token.to_lowercase();
        match self.index.get(&t) {
            Some(&id) => id,
            None => self.push(&t),
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `i` (0-based) holds id `i + 3`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.content_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Lowercased whitespace tokens mapped through `vocab`, truncated to
/// `max_len - 1` and prefixed with CLS.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(
        text.split_whitespace()
            .take(max_len.saturating_sub(1))
            .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK)),
    );
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain-classifier label: 0 for source, 1 for target.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// One attention block: single-head scaled dot-product self-attention with
/// a residual, then a position-wise feed-forward layer with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
}

const BLOCK_NAMES: [&str; 6] = ["w_q", "w_k", "w_v", "w_o", "w_1", "w_2"];

impl Block {
    fn zeros(dim: usize) -> Self {
        Block {
            w_q: Tensor::zeros(dim, dim),
            w_k: Tensor::zeros(dim, dim),
            w_v: Tensor::zeros(dim, dim),
            w_o: Tensor::zeros(dim, dim),
            w_1: Tensor::zeros(dim, 4 * dim),
            w_2: Tensor::zeros(4 * dim, dim),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.w_2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.w_2,
        ]
    }
}

/// Weights of the feature extractor and both heads. Row-vector convention:
/// a feature `h` is `1×d` and logits are `h · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub w_dc: Tensor,
    pub b_dc: Tensor,
}

/// Parameter name of tensor `name` in block `layer`, e.g. `encoder.0.w_q`.
pub fn block_param_name(layer: usize, name: &str) -> String {
    format!("encoder.{layer}.{name}")
}

const HEAD_NAMES: [&str; 4] = ["task_head.w", "task_head.b", "domain_head.w", "domain_head.b"];

impl EncoderParams {
    /// Single-block encoder with every weight zero.
    pub fn zeros(vocab_size: usize, dim: usize, classes: usize) -> Self {
        Self::zeros_layers(vocab_size, dim, classes, 1)
    }

    pub fn zeros_layers(vocab_size: usize, dim: usize, classes: usize, layers: usize) -> Self {
        EncoderParams {
            embedding: Tensor::zeros(vocab_size, dim),
            blocks: (0..layers).map(|_| Block::zeros(dim)).collect(),
            w_cls: Tensor::zeros(dim, classes),
            b_cls: Tensor::zeros(1, classes),
            w_dc: Tensor::zeros(dim, 2),
            b_dc: Tensor::zeros(1, 2),
        }
    }

    /// Single-block encoder, see [`EncoderParams::init_layers`].
    pub fn init(vocab_size: usize, dim: usize, classes: usize, embed_scale: f64, seed: u64) -> Self {
        Self::init_layers(vocab_size, dim, classes, 1, embed_scale, seed)
    }

    /// Embeddings uniform in ±`embed_scale`; linear layers uniform in
    /// ±1/√fan_in; biases zero.
    pub fn init_layers(
        vocab_size: usize,
        dim: usize,
        classes: usize,
        layers: usize,
        embed_scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros_layers(vocab_size, dim, classes, layers);
        fill_uniform(&mut p.embedding, embed_scale, &mut rng);
        for (name, t) in p.tensors_mut() {
            if name == "encoder.embedding" || name.ends_with(".b") {
                continue;
            }
            let bound = 1.0 / (t.rows() as f64).sqrt();
            fill_uniform(t, bound, &mut rng);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn classes(&self) -> usize {
        self.w_cls.cols()
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Named tensors: embedding, each block in order, task head, domain head.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("encoder.embedding".to_string(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            v.extend(BLOCK_NAMES.iter().zip(b.tensors()).map(|(n, t)| (block_param_name(l, n), t)));
        }
        let heads = [&self.w_cls, &self.b_cls, &self.w_dc, &self.b_dc];
        v.extend(HEAD_NAMES.iter().zip(heads).map(|(n, t)| (n.to_string(), t)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("encoder.embedding".to_string(), &mut self.embedding)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            v.extend(BLOCK_NAMES.iter().zip(b.tensors_mut()).map(|(n, t)| (block_param_name(l, n), t)));
        }
        let heads = [&mut self.w_cls, &mut self.b_cls, &mut self.w_dc, &mut self.b_dc];
        v.extend(HEAD_NAMES.iter().zip(heads).map(|(n, t)| (n.to_string(), t)));
        v
    }

    /// Declares every tensor as a named graph input.
    pub fn declare(&self, g: &mut Graph, trainable: bool) -> Result<EncoderVars> {
        let mut vars = Vec::new();
        for (name, t) in self.tensors() {
            vars.push(g.input(&name, t.rows(), t.cols(), trainable)?);
        }
        let blocks = vars[1..1 + 6 * self.layers()]
            .chunks(6)
            .map(|c| BlockVars {
                w_q: c[0],
                w_k: c[1],
                w_v: c[2],
                w_o: c[3],
                w_1: c[4],
                w_2: c[5],
            })
            .collect();
        let h = &vars[1 + 6 * self.layers()..];
        Ok(EncoderVars {
            embedding: vars[0],
            blocks,
            w_cls: h[0],
            b_cls: h[1],
            w_dc: h[2],
            b_dc: h[3],
        })
    }
}

impl Inputs for EncoderParams {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        match name {
            "encoder.embedding" => return Some(&self.embedding),
            "task_head.w" => return Some(&self.w_cls),
            "task_head.b" => return Some(&self.b_cls),
            "domain_head.w" => return Some(&self.w_dc),
            "domain_head.b" => return Some(&self.b_dc),
            _ => {}
        }
        let (layer, field) = name.strip_prefix("encoder.")?.split_once('.')?;
        let block = self.blocks.get(layer.parse::<usize>().ok()?)?;
        let i = BLOCK_NAMES.iter().position(|n| *n == field)?;
        Some(block.tensors()[i])
    }
}

fn fill_uniform(t: &mut Tensor, bound: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_1: Var,
    pub w_2: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub w_cls: Var,
    pub b_cls: Var,
    pub w_dc: Var,
    pub b_dc: Var,
}

impl EncoderVars {
    /// Variables in the order of [`EncoderParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for b in &self.blocks {
            v.extend([b.w_q, b.w_k, b.w_v, b.w_o, b.w_1, b.w_2]);
        }
        v.extend([self.w_cls, self.b_cls, self.w_dc, self.b_dc]);
        v
    }
}

/// Feed-forward with residual on every row of `z`.
fn feed_forward(g: &mut Graph, b: &BlockVars, z: Var) -> Result<Var> {
    let hidden = g.matmul(z, b.w_1)?;
    let hidden = g.relu(hidden)?;
    let ff = g.matmul(hidden, b.w_2)?;
    g.add(ff, z)
}

/// Attention of `queries` (one row per sequence, or one row per position
/// when `per_position`) over each sequence's keys and values.
fn attend(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    offsets: &[(usize, usize)],
    per_position: bool,
    inv_sqrt_d: f64,
) -> Result<Var> {
    let mut contexts = Vec::with_capacity(offsets.len());
    for (i, &(off, len)) in offsets.iter().enumerate() {
        let q = if per_position {
            g.slice_rows(queries, off, off + len)?
        } else {
            g.slice_rows(queries, i, i + 1)?
        };
        let k = g.slice_rows(keys, off, off + len)?;
        let v = g.slice_rows(values, off, off + len)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, inv_sqrt_d)?;
        let attn = g.softmax(scores)?;
        contexts.push(g.matmul(attn, v)?);
    }
    g.concat_rows(&contexts)
}

/// Builds the pooled CLS features (`n×d`) for a batch of token sequences.
///
/// Every block but the last updates all positions. The last block's output
/// is only read at CLS, so its query and feed-forward layer are evaluated
/// for that row alone; keys and values cover every position. With
/// `adapter`, the adapter transforms every token embedding before the first
/// block.
pub fn encode_graph(
    g: &mut Graph,
    enc: &EncoderVars,
    adapter: Option<&AdapterVars>,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Invalid("encode: empty batch".into()));
    }
    let Some((last, inner)) = enc.blocks.split_last() else {
        return Err(Error::Invalid("encode: encoder has no blocks".into()));
    };
    let mut flat = Vec::new();
    let mut offsets = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Invalid("encode: empty token sequence".into()));
        }
        offsets.push((flat.len(), s.len()));
        flat.extend_from_slice(s);
    }
    let dim = g.shape(enc.embedding)[1];
    let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
    let mut x = g.gather(enc.embedding, &flat)?;
    if let Some(a) = adapter {
        x = adapter_graph(g, a, x)?;
    }
    for b in inner {
        let queries = g.matmul(x, b.w_q)?;
        let keys = g.matmul(x, b.w_k)?;
        let values = g.matmul(x, b.w_v)?;
        let ctx = attend(g, queries, keys, values, &offsets, true, inv_sqrt_d)?;
        let attn_out = g.matmul(ctx, b.w_o)?;
        let z = g.add(attn_out, x)?;
        x = feed_forward(g, b, z)?;
    }
    let keys = g.matmul(x, last.w_k)?;
    let values = g.matmul(x, last.w_v)?;
    let cls_rows: Vec<usize> = offsets.iter().map(|&(o, _)| o).collect();
    let x_cls = g.gather(x, &cls_rows)?;
    let queries = g.matmul(x_cls, last.w_q)?;
    let ctx = attend(g, queries, keys, values, &offsets, false, inv_sqrt_d)?;
    let attn_out = g.matmul(ctx, last.w_o)?;
    let z = g.add(attn_out, x_cls)?;
    feed_forward(g, last, z)
}

pub fn classify_graph(g: &mut Graph, enc: &EncoderVars, h: Var) -> Result<Var> {
    let l = g.matmul(h, enc.w_cls)?;
    g.add_row(l, enc.b_cls)
}

pub fn domain_logits_graph(g: &mut Graph, enc: &EncoderVars, h: Var) -> Result<Var> {
    let l = g.matmul(h, enc.w_dc)?;
    g.add_row(l, enc.b_dc)
}

struct Both<'a> {
    enc: &'a EncoderParams,
    adapter: Option<&'a AdapterParams>,
}

impl Inputs for Both<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.enc
            .lookup(name)
            .or_else(|| self.adapter.and_then(|a| a.lookup(name)))
    }
}

/// Pooled features for a batch of sequences, one row per sequence.
pub fn encode_batch(
    params: &EncoderParams,
    adapter: Option<&AdapterParams>,
    seqs: &[Vec<usize>],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = params.declare(&mut g, false)?;
    let avars = adapter.map(|a| a.declare(&mut g, false)).transpose()?;
    let h = encode_graph(&mut g, &enc, avars.as_ref(), seqs)?;
    g.eval(&Both { enc: params, adapter }, h)
}

/// Pooled CLS feature `h = ψ(x)`.
pub fn encode(params: &EncoderParams, token_ids: &[usize]) -> Result<Vec<f64>> {
    Ok(encode_batch(params, None, &[token_ids.to_vec()])?.into_data())
}

fn linear(h: &[f64], w: &Tensor, b: &Tensor, op: &'static str) -> Result<Vec<f64>> {
    if h.len() != w.rows() {
        return Err(Error::shape(op, format!("feature has {} dims, head expects {}", h.len(), w.rows())));
    }
    let mut out = b.data().to_vec();
    for (i, hv) in h.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row_slice(i)) {
            *o += hv * wv;
        }
    }
    Ok(out)
}

/// Task logits (no softmax).
pub fn classify(params: &EncoderParams, h: &[f64]) -> Result<Vec<f64>> {
    linear(h, &params.w_cls, &params.b_cls, "classify")
}

pub fn domain_logits(params: &EncoderParams, h: &[f64]) -> Result<Vec<f64>> {
    linear(h, &params.w_dc, &params.b_dc, "domain_logits")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
