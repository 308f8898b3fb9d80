//! Post-layer-norm encoder-decoder transformer over concatenated
//! context+current sequences.
//!
//! Besides logits, a forward pass exposes the two things importance scoring
//! needs: the residual-added output of the topmost feed-forward sublayer
//! (before its layer norm) on both stacks, and the graph nodes holding the
//! per-position embedding outputs (token embedding plus positional encoding).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::ModelError;
use crate::pair::{TokenId, BOS, EOS, PAD};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 205,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            max_len: 256,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} < 6", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.max_len == 0 {
            return bad("n_layers, d_ffn and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a hash over the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.iter() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter indices for one attention block.
#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayerIdx {
    attn: AttnIdx,
    ln1: NormIdx,
    ffn: FfnIdx,
    ln2: NormIdx,
}

#[derive(Clone, Debug)]
struct DecLayerIdx {
    self_attn: AttnIdx,
    ln1: NormIdx,
    cross: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
    ln3: NormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    enc: Vec<EncLayerIdx>,
    dec: Vec<DecLayerIdx>,
    out_w: usize,
    out_b: usize,
}

/// Model configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape")
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

fn sinusoidal(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("shape")
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let mut p = ParamStore::new();
        let embed = p.push("embed", init.normal(&[v, d], (d as f64).powf(-0.5)));

        let attn = |p: &mut ParamStore, init: &mut Init, prefix: &str| AttnIdx {
            wq: p.push(format!("{prefix}.wq"), init.xavier(d, d)),
            bq: p.push(format!("{prefix}.bq"), Tensor::zeros(&[d])),
            wk: p.push(format!("{prefix}.wk"), init.xavier(d, d)),
            bk: p.push(format!("{prefix}.bk"), Tensor::zeros(&[d])),
            wv: p.push(format!("{prefix}.wv"), init.xavier(d, d)),
            bv: p.push(format!("{prefix}.bv"), Tensor::zeros(&[d])),
            wo: p.push(format!("{prefix}.wo"), init.xavier(d, d)),
            bo: p.push(format!("{prefix}.bo"), Tensor::zeros(&[d])),
        };
        let norm = |p: &mut ParamStore, prefix: &str| NormIdx {
            gain: p.push(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: p.push(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        };
        let ffn = |p: &mut ParamStore, init: &mut Init, prefix: &str| FfnIdx {
            w1: p.push(format!("{prefix}.w1"), init.xavier(d, f)),
            b1: p.push(format!("{prefix}.b1"), Tensor::zeros(&[f])),
            w2: p.push(format!("{prefix}.w2"), init.xavier(f, d)),
            b2: p.push(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        };

        let mut enc = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            enc.push(EncLayerIdx {
                attn: attn(&mut p, &mut init, &format!("enc.{l}.self")),
                ln1: norm(&mut p, &format!("enc.{l}.ln1")),
                ffn: ffn(&mut p, &mut init, &format!("enc.{l}.ffn")),
                ln2: norm(&mut p, &format!("enc.{l}.ln2")),
            });
        }
        let mut dec = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            dec.push(DecLayerIdx {
                self_attn: attn(&mut p, &mut init, &format!("dec.{l}.self")),
                ln1: norm(&mut p, &format!("dec.{l}.ln1")),
                cross: attn(&mut p, &mut init, &format!("dec.{l}.cross")),
                ln2: norm(&mut p, &format!("dec.{l}.ln2")),
                ffn: ffn(&mut p, &mut init, &format!("dec.{l}.ffn")),
                ln3: norm(&mut p, &format!("dec.{l}.ln3")),
            });
        }
        let out_w = p.push("out.w", init.xavier(d, v));
        let out_b = p.push("out.b", Tensor::zeros(&[v]));
        let positions = sinusoidal(cfg.max_len, d);
        Ok(Self {
            cfg,
            params: p,
            layout: Layout {
                embed,
                enc,
                dec,
                out_w,
                out_b,
            },
            positions,
        })
    }

    /// Rebuilds a model around loaded parameters; names and shapes must match
    /// what `cfg` would initialize.
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg)?;
        if params.names() != model.params.names() {
            return Err(ModelError::Config(
                "parameter names do not match the model layout".into(),
            ));
        }
        for ((name, fresh), loaded) in model.params.iter().zip(params.tensors()) {
            if fresh.shape() != loaded.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    fresh.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Name of the topmost gain that follows the encoder tap.
    pub fn top_encoder_norm_gain(&self) -> &str {
        let l = self.layout.enc.last().expect("n_layers >= 1");
        &self.params.names()[l.ln2.gain]
    }

    /// Name of the topmost gain that follows the decoder tap.
    pub fn top_decoder_norm_gain(&self) -> &str {
        let l = self.layout.dec.last().expect("n_layers >= 1");
        &self.params.names()[l.ln3.gain]
    }
}

/// Encoder output: final representations plus the pre-norm tap.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n, d]` embedding output (token embedding plus positions).
    pub embed: Var,
    /// `[n, d]` topmost FFN output before layer norm.
    pub hidden: Var,
    /// `[n, d]` final encoder states.
    pub states: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub embed: Var,
    pub hidden: Var,
    /// `[m, vocab]`
    pub logits: Var,
}

/// Everything a forward pass over one document pair exposes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub enc: Encoded,
    pub dec: Decoded,
}

/// A define-by-run forward session: one graph with every parameter bound
/// as a leaf.
pub struct Tape<'m> {
    model: &'m Model,
    pub graph: Graph,
    pvars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Tape<'m> {
    /// Session with dropout disabled.
    pub fn new(model: &'m Model) -> Self {
        let mut graph = Graph::new();
        let pvars = model
            .params
            .tensors()
            .iter()
            .map(|t| graph.leaf(t.clone()))
            .collect();
        Self {
            model,
            graph,
            pvars,
            dropout: None,
        }
    }

    /// Session that applies dropout at the configured rate (if nonzero).
    pub fn with_dropout(model: &'m Model, seed: u64) -> Self {
        let mut tape = Self::new(model);
        if model.cfg.dropout_rate > 0.0 {
            tape.dropout = Some((model.cfg.dropout_rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        tape
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param_var(&self, index: usize) -> Var {
        self.pvars[index]
    }

    /// Parameter gradients in [`ParamStore`] order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.pvars.iter().map(|&v| grads.take(v)).collect()
    }

    fn p(&self, i: usize) -> Var {
        self.pvars[i]
    }

    fn drop(&mut self, x: Var) -> Result<Var, ModelError> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(self.graph.dropout(x, mask)?)
    }

    fn embed(&mut self, tokens: &[TokenId], offset: Option<&Tensor>) -> Result<Var, ModelError> {
        self.model.check_tokens(tokens)?;
        let d = self.model.cfg.d_model;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = self.p(self.model.layout.embed);
        let e = self.graph.embedding(table, &ids)?;
        let e = self.graph.scale(e, (d as f64).sqrt());
        let mut pos = self.model.positions.data()[..tokens.len() * d].to_vec();
        if let Some(off) = offset {
            for (p, o) in pos.iter_mut().zip(off.data()) {
                *p += o;
            }
        }
        let pos = Tensor::new(vec![tokens.len(), d], pos)?;
        Ok(self.graph.shift(e, &pos)?)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var, ModelError> {
        let y = self.graph.matmul(x, self.p(w))?;
        Ok(self.graph.add_row(y, self.p(b))?)
    }

    fn norm(&mut self, x: Var, n: &NormIdx) -> Result<Var, ModelError> {
        Ok(self
            .graph
            .layer_norm(x, self.p(n.gain), self.p(n.bias), 1, LAYER_NORM_EPS)?)
    }

    fn attention(
        &mut self,
        query: Var,
        memory: Var,
        idx: &AttnIdx,
        mask: &Tensor,
    ) -> Result<Var, ModelError> {
        let d = self.model.cfg.d_model;
        let heads = self.model.cfg.n_heads;
        let dk = d / heads;
        let q = self.linear(query, idx.wq, idx.bq)?;
        let k = self.linear(memory, idx.wk, idx.bk)?;
        let v = self.linear(memory, idx.wv, idx.bv)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = self.graph.slice_cols(q, lo, hi)?;
            let kh = self.graph.slice_cols(k, lo, hi)?;
            let vh = self.graph.slice_cols(v, lo, hi)?;
            let s = self.graph.matmul_nt(qh, kh)?;
            let s = self.graph.scale(s, scale);
            let s = self.graph.shift(s, mask)?;
            let a = self.graph.softmax(s, 1)?;
            outs.push(self.graph.matmul(a, vh)?);
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)?
        };
        self.linear(o, idx.wo, idx.bo)
    }

    fn ffn(&mut self, x: Var, idx: &FfnIdx) -> Result<Var, ModelError> {
        let h = self.linear(x, idx.w1, idx.b1)?;
        let h = self.graph.relu(h);
        let h = self.drop(h)?;
        self.linear(h, idx.w2, idx.b2)
    }

    /// Runs the encoder. `embed_offset` (shape `[n, d]`) is added to the
    /// embedding output and exists for finite-difference probes.
    pub fn encode(
        &mut self,
        src: &[TokenId],
        embed_offset: Option<&Tensor>,
    ) -> Result<Encoded, ModelError> {
        let embed = self.embed(src, embed_offset)?;
        let mask = key_mask(src, src.len(), false);
        let mut x = self.drop(embed)?;
        let mut hidden = x;
        let layers = self.model.layout.enc.clone();
        for layer in &layers {
            let a = self.attention(x, x, &layer.attn, &mask)?;
            let a = self.drop(a)?;
            let r = self.graph.add(x, a)?;
            let x1 = self.norm(r, &layer.ln1)?;
            let f = self.ffn(x1, &layer.ffn)?;
            let f = self.drop(f)?;
            hidden = self.graph.add(x1, f)?;
            x = self.norm(hidden, &layer.ln2)?;
        }
        Ok(Encoded {
            embed,
            hidden,
            states: x,
        })
    }

    /// Runs the causal decoder over teacher-forced inputs `tgt_in`.
    /// `src` is only consulted for its padding mask.
    pub fn decode(
        &mut self,
        tgt_in: &[TokenId],
        src: &[TokenId],
        enc: &Encoded,
        embed_offset: Option<&Tensor>,
    ) -> Result<Decoded, ModelError> {
        let embed = self.embed(tgt_in, embed_offset)?;
        let self_mask = key_mask(tgt_in, tgt_in.len(), true);
        let cross_mask = key_mask(src, tgt_in.len(), false);
        let mut y = self.drop(embed)?;
        let mut hidden = y;
        let layers = self.model.layout.dec.clone();
        for layer in &layers {
            let a = self.attention(y, y, &layer.self_attn, &self_mask)?;
            let a = self.drop(a)?;
            let r = self.graph.add(y, a)?;
            let y1 = self.norm(r, &layer.ln1)?;
            let c = self.attention(y1, enc.states, &layer.cross, &cross_mask)?;
            let c = self.drop(c)?;
            let r = self.graph.add(y1, c)?;
            let y2 = self.norm(r, &layer.ln2)?;
            let f = self.ffn(y2, &layer.ffn)?;
            let f = self.drop(f)?;
            hidden = self.graph.add(y2, f)?;
            y = self.norm(hidden, &layer.ln3)?;
        }
        let logits = self.linear(y, self.model.layout.out_w, self.model.layout.out_b)?;
        Ok(Decoded {
            embed,
            hidden,
            logits,
        })
    }

    /// Encoder plus teacher-forced decoder over one pair's token sequences.
    pub fn forward(&mut self, src: &[TokenId], tgt_in: &[TokenId]) -> Result<ForwardTrace, ModelError> {
        let enc = self.encode(src, None)?;
        let dec = self.decode(tgt_in, src, &enc, None)?;
        Ok(ForwardTrace { enc, dec })
    }
}

/// Output of greedy decoding: the generated current sentence (without EOS)
/// and whether generation stopped before producing EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Translation {
    pub tokens: Vec<TokenId>,
    pub truncated: bool,
}

impl Model {
    /// Greedily extends `tgt_prefix` (BOS, target context, separator) until
    /// EOS, `max_new` generated tokens, or `max_len` positions.
    pub fn greedy_translate(
        &self,
        src: &[TokenId],
        tgt_prefix: &[TokenId],
        max_new: usize,
    ) -> Result<Translation, ModelError> {
        let mut prefix = if tgt_prefix.is_empty() {
            vec![BOS]
        } else {
            tgt_prefix.to_vec()
        };
        let start = prefix.len();
        let mut tape = Tape::new(self);
        let enc = tape.encode(src, None)?;
        while prefix.len() - start < max_new && prefix.len() < self.cfg.max_len {
            let dec = tape.decode(&prefix, src, &enc, None)?;
            let logits = tape.graph.value(dec.logits);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let next = best as TokenId;
            if next == EOS {
                return Ok(Translation {
                    tokens: prefix[start..].to_vec(),
                    truncated: false,
                });
            }
            prefix.push(next);
        }
        Ok(Translation {
            tokens: prefix[start..].to_vec(),
            truncated: true,
        })
    }
}

/// Additive attention mask of shape `[queries, keys.len()]`: PAD keys are
/// masked, and with `causal` so are keys after the query position.
pub(crate) fn key_mask(keys: &[TokenId], queries: usize, causal: bool) -> Tensor {
    let n = keys.len();
    let mut data = vec![0.0; queries * n];
    for i in 0..queries {
        for (j, &k) in keys.iter().enumerate() {
            if k == PAD || (causal && j > i) {
                data[i * n + j] = MASKED;
            }
        }
    }
    Tensor::new(vec![queries, n], data).expect("shape")
}
