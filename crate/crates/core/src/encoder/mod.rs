//! Shared (siamese) transformer encoder, pooling, and the projection of a
//! sentence vector into prefix slots for the conditional MLM pass.
//!
//! One [`ParamSet`] holds every weight: the encoder proper, the projection
//! MLP, the MLM output bias (the output matrix is the token embedding table,
//! read transposed), the skip-variant head and the NLI classifier.

use std::rc::Rc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, ParamSet, Real, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Sentences embedded per forward pass at inference.
pub const EMBED_CHUNK: usize = 64;

pub const TOKEN_EMBEDDINGS: &str = "embeddings.token";
/// Rows `0..max_len` are token positions; rows `max_len..max_len + N` are
/// the prefix slots.
pub const POSITION_EMBEDDINGS: &str = "embeddings.position";
pub const MLM_BIAS: &str = "mlm.bias";
pub const NLI_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "cls" => Ok(Self::Cls),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (mean|max|cls)"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Cls => "cls",
        })
    }
}

/// Which vector stands for a sentence at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// The pooled encoder output.
    Pooled,
    /// The mean of the projected vectors.
    ProjMean,
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "proj-mean" | "proj_mean" => Ok(Self::ProjMean),
            _ => Err(Error::Config(format!(
                "unknown representation {s:?} (pooled|proj-mean)"
            ))),
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::ProjMean => "proj-mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Number of projected vectors `N`, the first being the identity.
    pub n_proj: usize,
    pub pooling: Pooling,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ff: 128,
            max_len: 64,
            vocab_size: 512,
            n_proj: 15,
            pooling: Pooling::Mean,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ff == 0 {
            return bad("layers, heads, hidden and ff must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.n_proj == 0 {
            return bad("n_proj must be at least 1".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size <= crate::corpus::vocab::NUM_RESERVED {
            return bad(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (v, d, f) = (self.vocab_size, self.hidden, self.ff);
        let mut out = vec![
            (TOKEN_EMBEDDINGS.to_string(), vec![v, d], Init::Normal),
            (
                POSITION_EMBEDDINGS.to_string(),
                vec![self.max_len + self.n_proj, d],
                Init::Normal,
            ),
            ("embeddings.ln.scale".into(), vec![d], Init::Ones),
            ("embeddings.ln.bias".into(), vec![d], Init::Zeros),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{w}")), vec![d, d], Init::Normal));
                out.push((p(&format!("attn.b{w}")), vec![d], Init::Zeros));
            }
            out.push((p("ffn.w1"), vec![d, f], Init::Normal));
            out.push((p("ffn.b1"), vec![f], Init::Zeros));
            out.push((p("ffn.w2"), vec![f, d], Init::Normal));
            out.push((p("ffn.b2"), vec![d], Init::Zeros));
            for ln in ["ln1", "ln2"] {
                out.push((p(&format!("{ln}.scale")), vec![d], Init::Ones));
                out.push((p(&format!("{ln}.bias")), vec![d], Init::Zeros));
            }
        }
        if self.n_proj > 1 {
            out.push(("proj.w1".into(), vec![d, 2 * d], Init::Normal));
            out.push(("proj.b1".into(), vec![2 * d], Init::Zeros));
            out.push(("proj.w2".into(), vec![2 * d, 2 * d], Init::Normal));
            out.push(("proj.b2".into(), vec![2 * d], Init::Zeros));
            out.push(("proj.w3".into(), vec![2 * d, (self.n_proj - 1) * d], Init::Normal));
            out.push(("proj.b3".into(), vec![(self.n_proj - 1) * d], Init::Zeros));
        }
        out.push((MLM_BIAS.into(), vec![v], Init::Zeros));
        out.push(("mlm.skip.w".into(), vec![2 * d, d], Init::Normal));
        out.push(("mlm.skip.b".into(), vec![d], Init::Zeros));
        out.push(("nli.w".into(), vec![4 * d, NLI_CLASSES], Init::Normal));
        out.push(("nli.b".into(), vec![NLI_CLASSES], Init::Zeros));
        out
    }

    /// Name and shape of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }
}

/// Truncated normal (±2σ) weights, zero biases, unit layer-norm scales.
pub fn init_params<T: Real, R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<ParamSet<T>> {
    init_params_with_std(config, INIT_STD, rng)
}

/// [`init_params`] with a custom standard deviation.
pub fn init_params_with_std<T: Real, R: Rng + ?Sized>(
    config: &EncoderConfig,
    std: f64,
    rng: &mut R,
) -> Result<ParamSet<T>> {
    config.validate()?;
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
    let mut params = ParamSet::new();
    for (name, shape, init) in config.layout() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal => (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break T::of(x);
                    }
                })
                .collect(),
        };
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(params)
}

/// Fails unless `params` holds exactly the tensors `config` describes.
pub fn check_params<T: Real>(config: &EncoderConfig, params: &ParamSet<T>) -> Result<()> {
    let expected = config.parameter_shapes();
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(Error::ConfigMismatch(format!("parameter {name} is missing"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != expected.len() {
        let extra = params
            .names()
            .find(|n| !expected.iter().any(|(e, _)| e == *n))
            .cloned()
            .unwrap_or_default();
        return Err(Error::ConfigMismatch(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct Encoded<'t, T> {
    /// `[batch × len × hidden]`.
    pub seq: Var<'t, T>,
    /// `batch × len` attention mask; prefix slots are always visible.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    /// Number of leading prefix slots.
    pub prefix_len: usize,
}

/// Forward passes over bound parameters. With a dropout generator the
/// passes run in training mode.
pub struct Encoder<'a, 't, T: Real> {
    config: &'a EncoderConfig,
    params: &'a BoundParams<'t, T>,
    tape: &'t Tape<T>,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a, 't, T: Real> Encoder<'a, 't, T> {
    /// Inference mode: dropout disabled.
    pub fn new(config: &'a EncoderConfig, params: &'a BoundParams<'t, T>) -> Self {
        let tape = params.var(TOKEN_EMBEDDINGS).tape();
        Self {
            config,
            params,
            tape,
            rng: None,
        }
    }

    pub fn training(config: &'a EncoderConfig, params: &'a BoundParams<'t, T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new(config, params)
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.config
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, name: &str) -> Var<'t, T> {
        self.params.var(name)
    }

    fn dropout(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.rng.as_mut() {
            Some(rng) if self.config.dropout > 0.0 => x.dropout(self.config.dropout, &mut **rng),
            _ => Ok(x),
        }
    }

    /// Runs the transformer over a token batch. A `[batch × n × hidden]`
    /// prefix is placed in front of the tokens, each slot with its own
    /// learned position embedding, and the output then has `n + len`
    /// positions.
    pub fn encode(&mut self, tokens: &TokenBatch, prefix: Option<Var<'t, T>>) -> Result<Encoded<'t, T>> {
        let c = self.config;
        let (b, l, d) = (tokens.batch, tokens.len, c.hidden);
        if l > c.max_len {
            return Err(Error::Contract(format!(
                "sequence length {l} exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        let ids = Rc::new(tokens.ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let positions = Rc::new((0..b).flat_map(|_| 0..l).collect::<Vec<_>>());
        let tok = self.param(TOKEN_EMBEDDINGS).gather_rows(ids)?;
        let pos = self.param(POSITION_EMBEDDINGS).gather_rows(positions)?;
        let mut x = tok.add(pos)?.reshape(&[b, l, d])?;
        let mut mask = tokens.mask.clone();
        let mut prefix_len = 0;
        if let Some(p) = prefix {
            let shape = p.shape();
            if shape.len() != 3 || shape[0] != b || shape[2] != d || shape[1] > c.n_proj {
                return Err(Error::dim("encode prefix", &shape, &[b, c.n_proj, d]));
            }
            let n = shape[1];
            let slots = Rc::new((0..b).flat_map(|_| (0..n).map(|i| c.max_len + i)).collect::<Vec<_>>());
            let slots = self
                .param(POSITION_EMBEDDINGS)
                .gather_rows(slots)?
                .reshape(&[b, n, d])?;
            x = p.add(slots)?.concat_seq(x)?;
            mask = tokens
                .mask
                .chunks(l)
                .flat_map(|row| std::iter::repeat_n(true, n).chain(row.iter().copied()))
                .collect();
            prefix_len = n;
        }
        let s = prefix_len + l;
        let x = x
            .reshape(&[b * s, d])?
            .layer_norm(self.param("embeddings.ln.scale"), self.param("embeddings.ln.bias"))?;
        let mut x = self.dropout(x)?;
        let keep = Rc::new(attention_keep(&mask, b, c.heads, s));
        for layer in 0..c.layers {
            x = self.layer(layer, x, b, s, keep.clone())?;
        }
        Ok(Encoded {
            seq: x.reshape(&[b, s, d])?,
            mask,
            batch: b,
            len: s,
            prefix_len,
        })
    }

    /// Post-LN block: multi-head self-attention then a GELU feed-forward
    /// layer, each with a residual connection. `x` is `[b·s × hidden]`.
    fn layer(&mut self, i: usize, x: Var<'t, T>, b: usize, s: usize, keep: Rc<Vec<bool>>) -> Result<Var<'t, T>> {
        let (d, h, dh) = (self.config.hidden, self.config.heads, self.config.head_dim());
        let p = |n: &str| self.params.var(&format!("layer{i}.{n}"));
        let split = |t: Var<'t, T>| t.reshape(&[b, s, h, dh])?.swap_middle_axes()?.reshape(&[b * h, s, dh]);
        let q = split(x.matmul(p("attn.wq"))?.add_bias(p("attn.bq"))?)?;
        let k = split(x.matmul(p("attn.wk"))?.add_bias(p("attn.bk"))?)?;
        let v = split(x.matmul(p("attn.wv"))?.add_bias(p("attn.bv"))?)?;
        let probs = q
            .bmm(k, true)?
            .scale(1.0 / (dh as f64).sqrt())?
            .masked_softmax_rows(keep)?;
        let ctx = probs
            .bmm(v, false)?
            .reshape(&[b, h, s, dh])?
            .swap_middle_axes()?
            .reshape(&[b * s, d])?;
        let (wo, bo) = (p("attn.wo"), p("attn.bo"));
        let (ln1s, ln1b, ln2s, ln2b) = (p("ln1.scale"), p("ln1.bias"), p("ln2.scale"), p("ln2.bias"));
        let (w1, b1, w2, b2) = (p("ffn.w1"), p("ffn.b1"), p("ffn.w2"), p("ffn.b2"));
        let attn = ctx.matmul(wo)?.add_bias(bo)?;
        let attn = self.dropout(attn)?;
        let x = x.add(attn)?.layer_norm(ln1s, ln1b)?;
        let ff = x.matmul(w1)?.add_bias(b1)?.gelu()?.matmul(w2)?.add_bias(b2)?;
        let ff = self.dropout(ff)?;
        x.add(ff)?.layer_norm(ln2s, ln2b)
    }

    /// Sentence vectors `[batch × hidden]` from unprefixed encoder output.
    pub fn pool(&self, encoded: &Encoded<'t, T>) -> Result<Var<'t, T>> {
        pool(encoded, self.config.pooling)
    }

    /// The projection set `[batch × N × hidden]` of sentence vectors `v`.
    /// Slot 0 is `v` itself; slots `1..N` come from a three-layer MLP
    /// whose last layer is `2d → (N−1)·d`.
    pub fn project(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let (n, d) = (self.config.n_proj, self.config.hidden);
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dim("project", &shape, &[d]));
        }
        let b = shape[0];
        if n == 1 {
            return v.reshape(&[b, 1, d]);
        }
        let p = |name: &str| self.params.var(name);
        let rest = v
            .matmul(p("proj.w1"))?
            .add_bias(p("proj.b1"))?
            .relu()?
            .matmul(p("proj.w2"))?
            .add_bias(p("proj.b2"))?
            .relu()?
            .matmul(p("proj.w3"))?
            .add_bias(p("proj.b3"))?;
        Var::concat_cols(&[v, rest])?.reshape(&[b, n, d])
    }

    /// Mean over the projection slots, `[b × N × d] → [b × d]`.
    pub fn projection_mean(&self, projected: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = projected.shape();
        if shape.len() != 3 {
            return Err(Error::dim("projection_mean", &shape, &[3]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let avg = self.tape.constant(Tensor::full(&[b, 1, n], T::of(1.0 / n as f64)));
        avg.bmm(projected, false)?.reshape(&[b, d])
    }

    /// Pooled vectors, or the mean of their projections.
    pub fn sentence_vectors(&mut self, tokens: &TokenBatch, representation: Representation) -> Result<Var<'t, T>> {
        let encoded = self.encode(tokens, None)?;
        let v = self.pool(&encoded)?;
        match representation {
            Representation::Pooled => Ok(v),
            Representation::ProjMean => {
                let projected = self.project(v)?;
                self.projection_mean(projected)
            }
        }
    }
}

/// Pools `[b × len × d]` output over its attention mask.
pub fn pool<'t, T: Real>(encoded: &Encoded<'t, T>, kind: Pooling) -> Result<Var<'t, T>> {
    match kind {
        Pooling::Mean => encoded.seq.masked_mean_pool(&encoded.mask),
        Pooling::Max => encoded.seq.masked_max_pool(&encoded.mask),
        Pooling::Cls => {
            let d = encoded.seq.shape()[2];
            if encoded.mask.chunks(encoded.len).any(|row| !row[0]) {
                return Err(Error::Contract("cls pooling needs a real token at position 0".into()));
            }
            encoded.seq.slice_seq(0, 1)?.reshape(&[encoded.batch, d])
        }
    }
}

/// Key-visibility mask for `[b·heads × s × s]` attention scores.
fn attention_keep(mask: &[bool], b: usize, heads: usize, s: usize) -> Vec<bool> {
    let mut keep = Vec::with_capacity(b * heads * s * s);
    for row in mask.chunks(s).take(b) {
        for _ in 0..heads * s {
            keep.extend_from_slice(row);
        }
    }
    keep
}

/// Token ids for one sentence, truncated to fit `max_len` (leaving room for
/// `[CLS]` under CLS pooling).
pub fn sentence_ids(config: &EncoderConfig, vocab: &Vocab, text: &str) -> Result<Vec<u32>> {
    let mut ids = vocab.tokenize(text);
    if ids.is_empty() {
        return Err(Error::Data(format!("sentence {text:?} has no tokens")));
    }
    let room = config.max_len - usize::from(config.pooling == Pooling::Cls);
    ids.truncate(room);
    Ok(ids)
}

/// Pads tokenized sentences into an encoder batch.
pub fn sentence_batch<S: AsRef<[u32]>>(config: &EncoderConfig, seqs: &[S]) -> Result<TokenBatch> {
    TokenBatch::from_sequences(seqs, config.pooling == Pooling::Cls, config.max_len)
}

/// Embeds many sentences with frozen parameters, [`EMBED_CHUNK`] per pass.
/// Chunks run in parallel when the `parallel` feature is on; results do not
/// depend on the thread count.
pub fn embed_sentences<T: Real, S: AsRef<str> + Sync>(
    config: &EncoderConfig,
    params: &ParamSet<T>,
    vocab: &Vocab,
    texts: &[S],
    representation: Representation,
) -> Result<Vec<Vec<f64>>> {
    check_params(config, params)?;
    let ids: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| sentence_ids(config, vocab, t.as_ref()))
        .collect::<Result<_>>()?;
    let run = |chunk: &[Vec<u32>]| -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let mut enc = Encoder::new(config, &bound);
        let batch = sentence_batch(config, chunk)?;
        let v = enc.sentence_vectors(&batch, representation)?;
        let v = v.value();
        Ok((0..v.rows())
            .map(|i| v.row(i).iter().map(|x| x.f64()).collect())
            .collect())
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<Vec<f64>>>> = {
        use rayon::prelude::*;
        ids.par_chunks(EMBED_CHUNK).map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<Vec<f64>>>> = ids.chunks(EMBED_CHUNK).map(run).collect();
    let mut out = Vec::with_capacity(texts.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Embeds one sentence with frozen parameters.
pub fn embed_sentence<T: Real>(
    config: &EncoderConfig,
    params: &ParamSet<T>,
    vocab: &Vocab,
    text: &str,
    representation: Representation,
) -> Result<Vec<f64>> {
    Ok(embed_sentences(config, params, vocab, &[text], representation)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(n_proj: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ff: 16,
            max_len: 16,
            vocab_size: 20,
            n_proj,
            pooling: Pooling::Mean,
            dropout: 0.0,
        }
    }

    fn params(cfg: &EncoderConfig) -> ParamSet<f64> {
        init_params(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn output_length_with_and_without_prefix() {
        let cfg = tiny(15);
        let p = params(&cfg);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let batch = TokenBatch::from_sequences(&[vec![5u32; 10]], false, 16).unwrap();
        assert_eq!(enc.encode(&batch, None).unwrap().seq.shape(), [1, 10, 8]);
        let prefix = tape.constant(Tensor::zeros(&[1, 15, 8]));
        let out = enc.encode(&batch, Some(prefix)).unwrap();
        assert_eq!(out.seq.shape(), [1, 25, 8]);
        assert_eq!(out.prefix_len, 15);
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::new();
        let seq = tape.constant(Tensor::from_f64(&[1, 3, 2], &[1., 3., 3., 1., 100., 100.]).unwrap());
        let enc = Encoded {
            seq,
            mask: vec![true, true, false],
            batch: 1,
            len: 3,
            prefix_len: 0,
        };
        assert_eq!(pool(&enc, Pooling::Mean).unwrap().value().data(), [2., 2.]);
        assert_eq!(pool(&enc, Pooling::Max).unwrap().value().data(), [3., 3.]);
        assert_eq!(pool(&enc, Pooling::Cls).unwrap().value().data(), [1., 3.]);
    }

    #[test]
    fn projection_keeps_v_in_slot_zero() {
        for n in [1, 5] {
            let cfg = tiny(n);
            let p = params(&cfg);
            let tape = Tape::new();
            let bound = p.bind(&tape);
            let enc = Encoder::new(&cfg, &bound);
            let v = tape.constant(Tensor::from_f64(&[1, 8], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap());
            let out = enc.project(v).unwrap();
            assert_eq!(out.shape(), [1, n, 8]);
            assert_eq!(&out.value().data()[..8], v.value().data());
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_extra_slots() {
        let cfg = tiny(4);
        let mut p = params(&cfg);
        p.insert("proj.w3", Tensor::zeros(&[16, 24]));
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let enc = Encoder::new(&cfg, &bound);
        let v = tape.constant(Tensor::ones(&[2, 8]));
        let out = enc.project(v).unwrap();
        for b in 0..2 {
            assert!(out.value().data()[b * 32 + 8..(b + 1) * 32].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn check_params_rejects_other_config() {
        let p = params(&tiny(3));
        check_params(&tiny(3), &p).unwrap();
        let err = check_params(&tiny(4), &p).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let cfg = tiny(1);
        let p = params(&cfg);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let batch = TokenBatch::from_sequences(&[vec![5u32; 17]], false, 32).unwrap();
        assert!(enc.encode(&batch, None).is_err());
    }
}
